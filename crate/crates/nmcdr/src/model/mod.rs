//! The four-stage forward computation and its parameters.

mod checkpoint;
mod mf;
mod plan;
mod stages;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use mf::{mf_init, mf_logits, mf_score};
pub use plan::{AdjacencyPlan, DomainPlan, GatherMeanPlan, OverlapPlan};
pub use stages::{
    complement_stage, encode_stage, forward_all, forward_all_with, inter_stage, intra_stage, predict_logits,
    predict_score, CompanionStage, DomainParamNodes, ForwardPass, PredHeadNodes, StageNodes,
};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{NumericsError, ParamSet, Tensor};
use crate::seeds;

#[derive(Error, Debug)]
pub enum ModelError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("parameter {0:?} missing from the set")]
    MissingParam(String),
    #[error("invalid model configuration: {0}")]
    BadConfig(String),
    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: String, msg: String },
}

/// The two interaction domains.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DomainTag {
    Z,
    Zbar,
}

impl DomainTag {
    pub fn key(self) -> &'static str {
        match self {
            DomainTag::Z => "z",
            DomainTag::Zbar => "zbar",
        }
    }

    pub fn no(self) -> u64 {
        match self {
            DomainTag::Z => 0,
            DomainTag::Zbar => 1,
        }
    }

    pub fn other(self) -> DomainTag {
        match self {
            DomainTag::Z => DomainTag::Zbar,
            DomainTag::Zbar => DomainTag::Z,
        }
    }
}

/// Stage output widths. Residual connections and the shared prediction head
/// require all five to be equal; they stay separate knobs so the constraint is
/// an explicit validation, not an accident of plumbing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelDims {
    pub embed: usize,
    pub hge: usize,
    pub igm: usize,
    pub cgm: usize,
    pub refine: usize,
    pub mlp_hidden: Vec<usize>,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims { embed: 128, hge: 128, igm: 128, cgm: 128, refine: 128, mlp_hidden: vec![128, 64] }
    }
}

impl ModelDims {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.embed == 0 {
            return Err(ModelError::BadConfig("embedding dimension must be positive".into()));
        }
        let all = [self.embed, self.hge, self.igm, self.cgm, self.refine];
        if all.iter().any(|&d| d != self.embed) {
            return Err(ModelError::BadConfig(format!(
                "stage dimensions must all match the embedding width for the residual \
                 connections and the shared prediction head (got {all:?})"
            )));
        }
        if self.mlp_hidden.iter().any(|&h| h == 0) {
            return Err(ModelError::BadConfig("MLP hidden widths must be positive".into()));
        }
        Ok(())
    }

    pub fn d(&self) -> usize {
        self.embed
    }
}

/// Structural knobs of the matching stages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub dims: ModelDims,
    /// Head iff train degree strictly exceeds this.
    pub k_head: usize,
    /// Matching neighbors sampled per user and pool.
    pub matching_size: usize,
    /// Use the full user pools instead of sampling (small instances only).
    pub exact_matching: bool,
    /// Draw fresh matching neighborhoods every epoch.
    pub resample_per_epoch: bool,
    /// Treat the other domain's representations as read-only inputs in the
    /// inter stage: each domain's ranking loss then trains its own tower
    /// only, which protects the donor domain from negative transfer.
    pub detach_cross_inputs: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dims: ModelDims::default(),
            k_head: 7,
            matching_size: 512,
            exact_matching: false,
            resample_per_epoch: true,
            detach_cross_inputs: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        self.dims.validate()?;
        if self.matching_size == 0 {
            return Err(ModelError::BadConfig("matching_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Stage switches. A disabled stage passes its input through unchanged and
/// its companion head is skipped.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationFlags {
    pub use_intra_matching: bool,
    pub use_inter_matching: bool,
    pub use_complementing: bool,
    pub use_companion_losses: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        AblationFlags {
            use_intra_matching: true,
            use_inter_matching: true,
            use_complementing: true,
            use_companion_losses: true,
        }
    }
}

impl AblationFlags {
    pub fn full() -> Self {
        Self::default()
    }

    /// Named variants used in ablation sweeps.
    pub fn variant(name: &str) -> Option<Self> {
        let mut f = Self::full();
        match name {
            "full" => {}
            "wo-igm" => f.use_intra_matching = false,
            "wo-cgm" => f.use_inter_matching = false,
            "wo-inc" => f.use_complementing = false,
            "wo-sup" => f.use_companion_losses = false,
            _ => return None,
        }
        Some(f)
    }
}

/// Row counts of both domains.
#[derive(Clone, Copy, Debug)]
pub struct ModelSizes {
    pub n_users_z: usize,
    pub n_items_z: usize,
    pub n_users_zbar: usize,
    pub n_items_zbar: usize,
}

/// All learnable tensors, addressable by `"{domain}.{role}"` names.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelParams {
    pub dims: ModelDims,
    pub set: ParamSet,
}

impl ModelParams {
    pub fn name(tag: DomainTag, role: &str) -> String {
        format!("{}.{}", tag.key(), role)
    }

    pub fn tensor(&self, tag: DomainTag, role: &str) -> Result<&Tensor, ModelError> {
        let name = Self::name(tag, role);
        self.set.get(&name).ok_or(ModelError::MissingParam(name))
    }

    pub fn all_finite(&self) -> bool {
        self.set.all_finite()
    }
}

fn normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    // Box-Muller; keeps the dependency surface flat.
    let u1: f64 = rng.random::<f64>().max(1e-300);
    let u2: f64 = rng.random();
    std * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

pub(crate) fn normal_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| normal(rng, std)).collect();
    Tensor::from_vec(rows, cols, data).expect("sized buffer")
}

fn xavier_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-limit..limit)).collect();
    Tensor::from_vec(rows, cols, data).expect("sized buffer")
}

fn half_identity(n: usize) -> Tensor {
    let mut t = Tensor::identity(n);
    for v in t.data_mut() {
        *v *= 0.5;
    }
    t
}

/// Initialize all parameters: embeddings ~ N(0, 0.01), weights Xavier-uniform,
/// biases zero, cross-fusion matrices 0.5·I so both fusion terms contribute
/// from the first step.
pub fn init_params(
    dims: &ModelDims,
    sizes: &ModelSizes,
    seed: u64,
) -> Result<ModelParams, ModelError> {
    dims.validate()?;
    let d = dims.d();
    let mut rng = seeds::stream_rng(seed, "init", &[]);
    let mut set = ParamSet::new();
    for tag in [DomainTag::Z, DomainTag::Zbar] {
        let (n_users, n_items) = match tag {
            DomainTag::Z => (sizes.n_users_z, sizes.n_items_z),
            DomainTag::Zbar => (sizes.n_users_zbar, sizes.n_items_zbar),
        };
        let put = |set: &mut ParamSet, role: &str, t: Tensor| -> Result<(), ModelError> {
            set.insert(&ModelParams::name(tag, role), t).map_err(ModelError::from)
        };
        put(&mut set, "user_emb", normal_tensor(&mut rng, n_users, d, 0.01))?;
        put(&mut set, "item_emb", normal_tensor(&mut rng, n_items, d, 0.01))?;
        put(&mut set, "w_hge", xavier_tensor(&mut rng, d, d))?;
        put(&mut set, "b_hge", Tensor::zeros(1, d))?;
        put(&mut set, "w_head", xavier_tensor(&mut rng, d, d))?;
        put(&mut set, "b_head", Tensor::zeros(1, d))?;
        put(&mut set, "w_tail", xavier_tensor(&mut rng, d, d))?;
        put(&mut set, "b_tail", Tensor::zeros(1, d))?;
        put(&mut set, "w_h", xavier_tensor(&mut rng, d, d))?;
        put(&mut set, "b_h", Tensor::zeros(1, d))?;
        put(&mut set, "w_t", xavier_tensor(&mut rng, d, d))?;
        put(&mut set, "b_t", Tensor::zeros(1, d))?;
        put(&mut set, "w_self", xavier_tensor(&mut rng, d, d))?;
        put(&mut set, "b_self", Tensor::zeros(1, d))?;
        put(&mut set, "w_other", xavier_tensor(&mut rng, d, d))?;
        put(&mut set, "b_other", Tensor::zeros(1, d))?;
        put(&mut set, "w_cross", half_identity(d))?;
        put(&mut set, "w_s", xavier_tensor(&mut rng, d, d))?;
        put(&mut set, "b_s", Tensor::zeros(1, d))?;
        put(&mut set, "w_o", xavier_tensor(&mut rng, d, d))?;
        put(&mut set, "b_o", Tensor::zeros(1, d))?;
        put(&mut set, "w_ref", xavier_tensor(&mut rng, d, d))?;
        put(&mut set, "b_ref", Tensor::zeros(1, d))?;
        let mut in_w = 2 * d;
        for (layer, &h) in dims.mlp_hidden.iter().enumerate() {
            put(&mut set, &format!("pred_w{layer}"), xavier_tensor(&mut rng, in_w, h))?;
            put(&mut set, &format!("pred_b{layer}"), Tensor::zeros(1, h))?;
            in_w = h;
        }
        put(&mut set, "pred_w_out", xavier_tensor(&mut rng, in_w, 1))?;
        put(&mut set, "pred_b_out", Tensor::zeros(1, 1))?;
    }
    Ok(ModelParams { dims: dims.clone(), set })
}
