//! Companion and final losses, the joint two-domain optimization loop, and
//! the matrix-factorization baseline trainer.

use std::rc::Rc;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{
    sample_negatives_with_rng, CrossDomainDataset, DataError, DomainIndex, DomainSplit, SplitSpec,
};
use crate::eval::{evaluate, EvalConfig, EvalError, EvalTarget};
use crate::graph::{
    build_graphs, counterpart_tables, sample_matching, GraphError, HeadTailLabels, MatchingConfig,
};
use crate::model::{
    forward_all_with, mf_logits, AblationFlags, CompanionStage, DomainPlan, DomainTag, ForwardPass,
    ModelConfig, ModelError, ModelParams, ModelSizes,
};
use crate::numerics::{math, Adam, NodeId, NumericsError, ParamSet, Tape, Tensor};
use crate::seeds;

#[derive(Error, Debug)]
pub enum TrainError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(
        "non-finite loss at epoch {epoch}, step {step}; largest parameter is \
         {param:?} with norm {norm:.3e}"
    )]
    NonFinite { epoch: usize, step: usize, param: String, norm: f64 },
    #[error("invalid training configuration: {0}")]
    BadConfig(String),
}

/// Static companion/final loss weights; defaults are all 1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
    pub w4: f64,
    pub w5: f64,
    pub w6: f64,
    pub w7: f64,
    pub w8: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { w1: 1.0, w2: 1.0, w3: 1.0, w4: 1.0, w5: 1.0, w6: 1.0, w7: 1.0, w8: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), TrainError> {
        let all = [self.w1, self.w2, self.w3, self.w4, self.w5, self.w6, self.w7, self.w8];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(TrainError::BadConfig("loss weights must be finite and >= 0".into()));
        }
        Ok(())
    }

    fn companion(&self, stage: CompanionStage) -> f64 {
        match stage {
            CompanionStage::G0 => self.w1,
            CompanionStage::G1 => self.w2,
            CompanionStage::G2 => self.w3,
            CompanionStage::G3 => self.w4,
            CompanionStage::Final => 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Positive pairs per domain per step; each brings
    /// `negatives_per_positive` sampled negatives.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub negatives_per_positive: usize,
    /// Validation cadence in epochs; 0 disables validation entirely.
    pub eval_every: usize,
    /// Validation rounds without improvement before stopping.
    pub patience: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 512,
            learning_rate: 1e-4,
            epochs: 100,
            negatives_per_positive: 1,
            eval_every: 0,
            patience: 10,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 || self.negatives_per_positive == 0 {
            return Err(TrainError::BadConfig("batch size and negatives must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(TrainError::BadConfig("learning rate must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// One epoch of the training history (serialized as a JSON line).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_co_z: f64,
    pub loss_co_zbar: f64,
    pub loss_cls_z: f64,
    pub loss_cls_zbar: f64,
    pub val_ndcg_z: Option<f64>,
    pub val_ndcg_zbar: Option<f64>,
    pub wall_ms: u64,
}

pub struct TrainOutcome {
    pub params: ModelParams,
    pub history: Vec<EpochRecord>,
    /// Epochs actually run (early stopping may cut the schedule short).
    pub epochs_run: usize,
}

/// Binary cross entropy from the pre-sigmoid logit:
/// softplus(z) - y·z, exact and overflow-free for any |z|.
pub fn bce(logit: f64, label: f64) -> f64 {
    math::softplus(logit) - label * logit
}

/// Mean stabilized BCE of a logit column against a 0/1 label column.
fn bce_mean_node(t: &mut Tape, logits: NodeId, labels: NodeId) -> Result<NodeId, NumericsError> {
    let n = t.value(logits).rows().max(1);
    let sp = t.softplus(logits)?;
    let yz = t.hadamard(labels, logits)?;
    let neg_yz = t.scale(yz, -1.0)?;
    let per_pair = t.add(sp, neg_yz)?;
    let total = t.reduce_sum(per_pair)?;
    t.scale(total, 1.0 / n as f64)
}

struct DomainBatch {
    users: Rc<Vec<usize>>,
    items: Rc<Vec<usize>>,
    labels: Tensor,
}

/// Positive slice plus freshly sampled negatives, in (pos, negs...) order.
fn assemble_batch(
    index: &DomainIndex,
    positives: &[(usize, usize)],
    start: usize,
    batch_size: usize,
    negatives_per_positive: usize,
    rng: &mut impl rand::Rng,
) -> Result<DomainBatch, TrainError> {
    let n = positives.len();
    let mut users = Vec::with_capacity(batch_size * (1 + negatives_per_positive));
    let mut items = Vec::with_capacity(users.capacity());
    let mut labels = Vec::with_capacity(users.capacity());
    for k in 0..batch_size.min(n) {
        let (u, i) = positives[(start + k) % n];
        users.push(u);
        items.push(i);
        labels.push(1.0);
        let interacted = index.interacted_items(u);
        let negs =
            sample_negatives_with_rng(index, &interacted, u, negatives_per_positive, rng)?;
        for j in negs {
            users.push(u);
            items.push(j);
            labels.push(0.0);
        }
    }
    let rows = labels.len();
    Ok(DomainBatch {
        users: Rc::new(users),
        items: Rc::new(items),
        labels: Tensor::from_vec(rows, 1, labels)?,
    })
}

struct DomainStepLoss {
    co: Option<NodeId>,
    cls: NodeId,
}

fn domain_losses(
    fwd: &mut ForwardPass,
    tag: DomainTag,
    batch: &DomainBatch,
    weights: &LossWeights,
    flags: &AblationFlags,
) -> Result<DomainStepLoss, TrainError> {
    let labels = fwd.tape.leaf(batch.labels.clone());
    let co = if flags.use_companion_losses {
        let mut acc: Option<NodeId> = None;
        for stage in ForwardPass::companion_stages(flags) {
            let logits = fwd.head_logits(tag, stage, batch.users.clone(), batch.items.clone())?;
            let mean = bce_mean_node(&mut fwd.tape, logits, labels)?;
            let weighted = fwd.tape.scale(mean, weights.companion(stage))?;
            acc = Some(match acc {
                None => weighted,
                Some(prev) => fwd.tape.add(prev, weighted)?,
            });
        }
        acc
    } else {
        None
    };
    let final_logits =
        fwd.head_logits(tag, CompanionStage::Final, batch.users.clone(), batch.items.clone())?;
    let cls = bce_mean_node(&mut fwd.tape, final_logits, labels)?;
    Ok(DomainStepLoss { co, cls })
}

fn largest_param(params: &ParamSet) -> (String, f64) {
    let mut best = (String::new(), 0.0f64);
    for (name, t) in params.iter() {
        let n = t.norm();
        if n > best.1 {
            best = (name.to_string(), n);
        }
    }
    best
}

/// Joint training of both domains: one batch from each per step, losses
/// summed, one Adam update. Matching neighborhoods are resampled per epoch;
/// everything is deterministic in `seed`.
#[allow(clippy::too_many_arguments)]
pub fn train(
    dataset: &CrossDomainDataset,
    split: &SplitSpec,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    weights: &LossWeights,
    flags: &AblationFlags,
    seed: u64,
) -> Result<TrainOutcome, TrainError> {
    model_cfg.validate()?;
    train_cfg.validate()?;
    weights.validate()?;

    let (graph_z, graph_zbar) = build_graphs(dataset, split)?;
    let labels_z = HeadTailLabels::label(&graph_z, model_cfg.k_head);
    let labels_zbar = HeadTailLabels::label(&graph_zbar, model_cfg.k_head);
    let (cp_z, cp_zbar) =
        counterpart_tables(&dataset.overlap, graph_z.n_users(), graph_zbar.n_users());
    let sizes = ModelSizes {
        n_users_z: dataset.domain_z.n_users(),
        n_items_z: dataset.domain_z.n_items(),
        n_users_zbar: dataset.domain_zbar.n_users(),
        n_items_zbar: dataset.domain_zbar.n_items(),
    };
    let mut params = crate::model::init_params(&model_cfg.dims, &sizes, seed)?;
    let mut adam = Adam::new(train_cfg.learning_rate);
    adam.beta1 = train_cfg.beta1;
    adam.beta2 = train_cfg.beta2;
    adam.epsilon = train_cfg.epsilon;

    let positives = |s: &DomainSplit| -> Vec<(usize, usize)> {
        s.train
            .iter()
            .enumerate()
            .flat_map(|(u, items)| items.iter().map(move |&i| (u, i)))
            .collect()
    };
    let base_pos_z = positives(&split.z);
    let base_pos_zbar = positives(&split.zbar);
    let mcfg = MatchingConfig {
        sample_size: model_cfg.matching_size,
        exact: model_cfg.exact_matching,
        resample_per_epoch: model_cfg.resample_per_epoch,
    };
    let d = model_cfg.dims.d();

    let mut history = Vec::new();
    let mut best_val = f64::NEG_INFINITY;
    let mut rounds_since_best = 0usize;
    let mut epochs_run = 0usize;

    for epoch in 0..train_cfg.epochs {
        let started = Instant::now();
        let match_z = sample_matching(
            &labels_z,
            &cp_z,
            graph_zbar.n_users(),
            &mcfg,
            seed,
            epoch as u64,
            DomainTag::Z.no(),
        );
        let match_zbar = sample_matching(
            &labels_zbar,
            &cp_zbar,
            graph_z.n_users(),
            &mcfg,
            seed,
            epoch as u64,
            DomainTag::Zbar.no(),
        );
        let plan_z = DomainPlan::build(&graph_z, &match_z, dataset.overlap.iter().copied(), d);
        let plan_zbar = DomainPlan::build(
            &graph_zbar,
            &match_zbar,
            dataset.overlap.iter().map(|&(a, b)| (b, a)),
            d,
        );

        let mut pos_z = base_pos_z.clone();
        let mut pos_zbar = base_pos_zbar.clone();
        pos_z.shuffle(&mut seeds::stream_rng(seed, "shuffle", &[0, epoch as u64]));
        pos_zbar.shuffle(&mut seeds::stream_rng(seed, "shuffle", &[1, epoch as u64]));
        let mut neg_rng_z = seeds::stream_rng(seed, "neg-train", &[0, epoch as u64]);
        let mut neg_rng_zbar = seeds::stream_rng(seed, "neg-train", &[1, epoch as u64]);

        let bs = train_cfg.batch_size;
        let steps = pos_z.len().max(pos_zbar.len()).div_ceil(bs).max(1);
        let mut sums = [0.0f64; 5]; // total, co_z, co_zbar, cls_z, cls_zbar

        for step in 0..steps {
            let batch_z = assemble_batch(
                &dataset.domain_z,
                &pos_z,
                step * bs,
                bs,
                train_cfg.negatives_per_positive,
                &mut neg_rng_z,
            )?;
            let batch_zbar = assemble_batch(
                &dataset.domain_zbar,
                &pos_zbar,
                step * bs,
                bs,
                train_cfg.negatives_per_positive,
                &mut neg_rng_zbar,
            )?;

            let step_result = (|| -> Result<[f64; 5], TrainError> {
                let mut fwd = forward_all_with(&params, &plan_z, &plan_zbar, flags, model_cfg.detach_cross_inputs)?;
                let loss_z = domain_losses(&mut fwd, DomainTag::Z, &batch_z, weights, flags)?;
                let loss_zbar =
                    domain_losses(&mut fwd, DomainTag::Zbar, &batch_zbar, weights, flags)?;

                let t = &mut fwd.tape;
                let mut total = {
                    let cls_z = t.scale(loss_z.cls, weights.w7)?;
                    let cls_zbar = t.scale(loss_zbar.cls, weights.w8)?;
                    t.add(cls_z, cls_zbar)?
                };
                if let Some(co) = loss_z.co {
                    let co = t.scale(co, weights.w5)?;
                    total = t.add(total, co)?;
                }
                if let Some(co) = loss_zbar.co {
                    let co = t.scale(co, weights.w6)?;
                    total = t.add(total, co)?;
                }

                let read = |t: &Tape, n: Option<NodeId>| n.map_or(0.0, |id| t.value(id).data()[0]);
                let observed = [
                    t.value(total).data()[0],
                    read(t, loss_z.co),
                    read(t, loss_zbar.co),
                    t.value(loss_z.cls).data()[0],
                    t.value(loss_zbar.cls).data()[0],
                ];
                let grads = t.backward(None)?;
                adam.apply(&mut params.set, &grads)?;
                Ok(observed)
            })();

            let observed = match step_result {
                Ok(v) => v,
                Err(TrainError::Numerics(NumericsError::NonFinite { .. })) | Err(TrainError::Model(ModelError::Numerics(NumericsError::NonFinite { .. }))) => {
                    let (param, norm) = largest_param(&params.set);
                    return Err(TrainError::NonFinite { epoch, step, param, norm });
                }
                Err(e) => return Err(e),
            };
            if !params.set.all_finite() {
                let (param, norm) = largest_param(&params.set);
                return Err(TrainError::NonFinite { epoch, step, param, norm });
            }
            for (s, o) in sums.iter_mut().zip(observed) {
                *s += o;
            }
        }

        epochs_run = epoch + 1;
        let inv = 1.0 / steps as f64;
        let mut record = EpochRecord {
            epoch,
            loss_total: sums[0] * inv,
            loss_co_z: sums[1] * inv,
            loss_co_zbar: sums[2] * inv,
            loss_cls_z: sums[3] * inv,
            loss_cls_zbar: sums[4] * inv,
            val_ndcg_z: None,
            val_ndcg_zbar: None,
            wall_ms: 0,
        };

        let mut stop = false;
        if train_cfg.eval_every > 0
            && split.validation
            && (epoch + 1) % train_cfg.eval_every == 0
        {
            let val = evaluate(
                &params,
                dataset,
                split,
                model_cfg,
                flags,
                &EvalConfig::default(),
                seed,
                EvalTarget::Validation,
            )?;
            record.val_ndcg_z = Some(val.z.ndcg10);
            record.val_ndcg_zbar = Some(val.zbar.ndcg10);
            let mean = val.mean_ndcg();
            if mean > best_val {
                best_val = mean;
                rounds_since_best = 0;
            } else {
                rounds_since_best += 1;
                if rounds_since_best >= train_cfg.patience {
                    stop = true;
                }
            }
        }

        record.wall_ms = started.elapsed().as_millis() as u64;
        log::info!(
            "epoch {epoch}: total {:.5} (cls {:.5}/{:.5})",
            record.loss_total,
            record.loss_cls_z,
            record.loss_cls_zbar
        );
        history.push(record);
        if stop {
            log::info!("early stop at epoch {epoch}: no val improvement in {rounds_since_best} rounds");
            break;
        }
    }

    Ok(TrainOutcome { params, history, epochs_run })
}

/// Train the matrix-factorization baseline on one domain; returns the factor
/// tables and the per-epoch mean BCE.
#[allow(clippy::too_many_arguments)]
pub fn train_mf(
    index: &DomainIndex,
    split: &DomainSplit,
    factors: usize,
    epochs: usize,
    learning_rate: f64,
    batch_size: usize,
    seed: u64,
) -> Result<(ParamSet, Vec<f64>), TrainError> {
    let mut params = crate::model::mf_init(index.n_users(), index.n_items(), factors, seed)?;
    let mut adam = Adam::new(learning_rate);
    let base: Vec<(usize, usize)> = split
        .train
        .iter()
        .enumerate()
        .flat_map(|(u, items)| items.iter().map(move |&i| (u, i)))
        .collect();
    let mut losses = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let mut pos = base.clone();
        pos.shuffle(&mut seeds::stream_rng(seed, "mf-shuffle", &[epoch as u64]));
        let mut neg_rng = seeds::stream_rng(seed, "mf-neg", &[epoch as u64]);
        let steps = pos.len().div_ceil(batch_size).max(1);
        let mut sum = 0.0;
        for step in 0..steps {
            let batch = assemble_batch(index, &pos, step * batch_size, batch_size, 1, &mut neg_rng)?;
            let mut t = Tape::new();
            let ids = params.mount(&mut t)?;
            let logits = mf_logits(&mut t, &ids, batch.users.clone(), batch.items.clone())?;
            let labels = t.leaf(batch.labels.clone());
            let loss = bce_mean_node(&mut t, logits, labels)?;
            sum += t.value(loss).data()[0];
            let grads = t.backward(None)?;
            adam.apply(&mut params, &grads)?;
        }
        losses.push(sum / steps as f64);
    }
    Ok((params, losses))
}
