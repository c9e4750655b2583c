//! Stability diagnostic for the compressed three-layer softplus model.
//!
//! The compressed model is: a neighborhood encoder layer, a fully connected
//! aggregation layer over all other nodes, and a softmax pair-scoring layer.
//! Its instability bound is
//!
//! `γ = C_sf · C_sp² · ‖A3‖₂ · (‖A2‖₂‖A1‖₂ + (Σ_{j∈N_u} 1/n_j)/(N-1) · ‖N2‖₂‖N1‖₂)`
//!
//! and the empirical check perturbs one node's embedding and measures how far
//! the pair score moves along the user-side path the bound tracks: the first
//! layer is recomputed for the perturbed node and its neighbors, the second
//! layer for the perturbed node, while the partner node's representation
//! stays at its reference value.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::numerics::math;
use crate::numerics::tape::matmul;
use crate::numerics::Tensor;
use crate::seeds;

use thiserror::Error;

#[derive(Error, Debug)]
pub enum StabilityError {
    #[error("need at least 2 nodes, got {0}")]
    TooFewNodes(usize),
    #[error("node {0} has no neighbors")]
    IsolatedNode(usize),
}

/// Compressed model instance over a homogeneous graph.
#[derive(Clone, Debug)]
pub struct CompressedModel {
    /// Undirected adjacency lists; every node needs at least one neighbor.
    pub adjacency: Vec<Vec<usize>>,
    /// Node embeddings, one row per node.
    pub x: Tensor,
    pub a1: Tensor,
    pub n1: Tensor,
    pub b1: Tensor,
    pub a2: Tensor,
    pub n2: Tensor,
    pub b2: Tensor,
    /// Maps the concatenated pair representation to class logits.
    pub a3: Tensor,
    pub b3: Tensor,
    /// Softmax Lipschitz constant used in the bound (1 is safe: the softmax
    /// Jacobian 2-norm never exceeds 1/2).
    pub c_sf: f64,
    /// Softplus Lipschitz constant (1 is safe: its derivative is a sigmoid).
    pub c_sp: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StabilityConfig {
    pub nodes: usize,
    pub embed_dim: usize,
    pub hidden1: usize,
    pub hidden2: usize,
    pub classes: usize,
    /// Extra random edges beyond the connectivity ring.
    pub extra_edges: usize,
    pub trials: usize,
    pub perturb_scale: f64,
    pub c_sf: f64,
    pub c_sp: f64,
    pub seed: u64,
}

impl Default for StabilityConfig {
    fn default() -> Self {
        StabilityConfig {
            nodes: 10,
            embed_dim: 6,
            hidden1: 8,
            hidden2: 8,
            classes: 2,
            extra_edges: 10,
            trials: 1000,
            perturb_scale: 1e-3,
            c_sf: 1.0,
            c_sp: 1.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StabilityDiagnostic {
    /// Largest per-node bound constant over the perturbed nodes.
    pub gamma_hat: f64,
    /// Largest observed ratio ‖z - z'‖₂ / ‖x_u - x_u'‖₂.
    pub empirical_ratio: f64,
    pub trials: usize,
    /// Every trial satisfied ratio ≤ γ̂(u) within 1e-9 slack.
    pub bound_satisfied: bool,
    pub c_sf: f64,
    pub c_sp: f64,
}

/// Spectral norm by power iteration on AᵀA: 100 rounds, 1e-10 tolerance.
pub fn operator_norm(a: &Tensor) -> f64 {
    let (rows, cols) = a.shape();
    if rows == 0 || cols == 0 {
        return 0.0;
    }
    // Deterministic, slightly tilted start so it is never orthogonal to the
    // leading singular vector by symmetry.
    let mut v: Vec<f64> = (0..cols).map(|j| 1.0 + j as f64 * 1e-3).collect();
    normalize(&mut v);
    let mut sigma = 0.0f64;
    for _ in 0..100 {
        // w = A v
        let mut w = vec![0.0; rows];
        for (i, wi) in w.iter_mut().enumerate() {
            *wi = a.row(i).iter().zip(&v).map(|(x, y)| x * y).sum();
        }
        // v' = Aᵀ w
        let mut next = vec![0.0; cols];
        for (i, wi) in w.iter().enumerate() {
            for (j, nj) in next.iter_mut().enumerate() {
                *nj += a.get(i, j) * wi;
            }
        }
        let new_sigma = norm(&w);
        let nn = norm(&next);
        if nn == 0.0 {
            return 0.0;
        }
        for x in next.iter_mut() {
            *x /= nn;
        }
        v = next;
        if (new_sigma - sigma).abs() <= 1e-10 * new_sigma.max(1.0) {
            return new_sigma;
        }
        sigma = new_sigma;
    }
    sigma
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn normalize(v: &mut [f64]) {
    let n = norm(v);
    if n > 0.0 {
        for x in v.iter_mut() {
            *x /= n;
        }
    }
}

fn softplus_row(v: &mut [f64]) {
    for x in v.iter_mut() {
        *x = math::softplus(*x);
    }
}

impl CompressedModel {
    /// Random instance: ring edges guarantee connectivity, extra edges are
    /// uniform, all weights are scaled normals.
    pub fn random(cfg: &StabilityConfig) -> Result<Self, StabilityError> {
        if cfg.nodes < 2 {
            return Err(StabilityError::TooFewNodes(cfg.nodes));
        }
        let mut rng = seeds::stream_rng(cfg.seed, "stability-model", &[]);
        let n = cfg.nodes;
        let mut adjacency = vec![Vec::new(); n];
        let connect = |adj: &mut Vec<Vec<usize>>, a: usize, b: usize| {
            if a != b && !adj[a].contains(&b) {
                adj[a].push(b);
                adj[b].push(a);
            }
        };
        for i in 0..n {
            connect(&mut adjacency, i, (i + 1) % n);
        }
        for _ in 0..cfg.extra_edges {
            let a = rng.random_range(0..n);
            let b = rng.random_range(0..n);
            connect(&mut adjacency, a, b);
        }
        for adj in adjacency.iter_mut() {
            adj.sort_unstable();
        }
        let mut mat = |rows: usize, cols: usize, scale: f64| {
            let data = (0..rows * cols)
                .map(|_| {
                    let u1: f64 = rng.random::<f64>().max(1e-300);
                    let u2: f64 = rng.random();
                    scale * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
                })
                .collect();
            Tensor::from_vec(rows, cols, data).expect("sized")
        };
        Ok(CompressedModel {
            adjacency,
            x: mat(n, cfg.embed_dim, 1.0),
            a1: mat(cfg.embed_dim, cfg.hidden1, 0.6),
            n1: mat(cfg.embed_dim, cfg.hidden1, 0.6),
            b1: mat(1, cfg.hidden1, 0.2),
            a2: mat(cfg.hidden1, cfg.hidden2, 0.6),
            n2: mat(cfg.hidden1, cfg.hidden2, 0.6),
            b2: mat(1, cfg.hidden2, 0.2),
            a3: mat(2 * cfg.hidden2, cfg.classes, 0.6),
            b3: mat(1, cfg.classes, 0.2),
            c_sf: cfg.c_sf,
            c_sp: cfg.c_sp,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.adjacency.len()
    }

    /// First-layer representation of every node from embeddings `x`.
    fn layer1(&self, x: &Tensor) -> Tensor {
        let n = self.n_nodes();
        let h_self = matmul(x, &self.a1);
        let mut out = Tensor::zeros(n, self.a1.cols());
        for i in 0..n {
            let neigh = &self.adjacency[i];
            let mut mean = vec![0.0; x.cols()];
            for &j in neigh {
                for (m, &v) in mean.iter_mut().zip(x.row(j)) {
                    *m += v;
                }
            }
            for m in mean.iter_mut() {
                *m /= neigh.len() as f64;
            }
            let mean_t = Tensor::from_vec(1, x.cols(), mean).expect("sized");
            let mapped = matmul(&mean_t, &self.n1);
            let row = out.data_mut()[i * self.a1.cols()..(i + 1) * self.a1.cols()].as_mut();
            for (k, r) in row.iter_mut().enumerate() {
                *r = h_self.get(i, k) + mapped.get(0, k) + self.b1.get(0, k);
            }
            softplus_row(row);
        }
        out
    }

    /// Second-layer representation of node `i` given all first-layer rows.
    fn layer2_row(&self, h1: &Tensor, sum_h1: &[f64], i: usize) -> Vec<f64> {
        let n = self.n_nodes();
        let d1 = h1.cols();
        let mut others = vec![0.0; d1];
        for (k, o) in others.iter_mut().enumerate() {
            *o = (sum_h1[k] - h1.get(i, k)) / (n - 1) as f64;
        }
        let hi = Tensor::from_vec(1, d1, h1.row(i).to_vec()).expect("sized");
        let others_t = Tensor::from_vec(1, d1, others).expect("sized");
        let own = matmul(&hi, &self.a2);
        let agg = matmul(&others_t, &self.n2);
        let mut row: Vec<f64> = (0..self.a2.cols())
            .map(|k| own.get(0, k) + agg.get(0, k) + self.b2.get(0, k))
            .collect();
        softplus_row(&mut row);
        row
    }

    /// Pair score: softmax over classes of the concatenated second-layer
    /// representations.
    fn score(&self, h2_u: &[f64], h2_v: &[f64]) -> Vec<f64> {
        let cat: Vec<f64> = h2_u.iter().chain(h2_v).copied().collect();
        let cat_t = Tensor::from_vec(1, cat.len(), cat).expect("sized");
        let logits = matmul(&cat_t, &self.a3);
        let mut row: Vec<f64> =
            (0..self.a3.cols()).map(|k| logits.get(0, k) + self.b3.get(0, k)).collect();
        let mut out = vec![0.0; row.len()];
        math::softmax_into(&row, &mut out);
        row.copy_from_slice(&out);
        row
    }

    /// Operator-norm products shared by every node's bound:
    /// (‖A3‖, ‖A2‖·‖A1‖, ‖N2‖·‖N1‖).
    fn norm_products(&self) -> (f64, f64, f64) {
        (
            operator_norm(&self.a3),
            operator_norm(&self.a2) * operator_norm(&self.a1),
            operator_norm(&self.n2) * operator_norm(&self.n1),
        )
    }

    fn gamma_from(&self, u: usize, norms: (f64, f64, f64)) -> Result<f64, StabilityError> {
        let n = self.n_nodes();
        if n < 2 {
            return Err(StabilityError::TooFewNodes(n));
        }
        if self.adjacency[u].is_empty() {
            return Err(StabilityError::IsolatedNode(u));
        }
        let inv_degree_sum: f64 = self
            .adjacency[u]
            .iter()
            .map(|&j| 1.0 / self.adjacency[j].len() as f64)
            .sum();
        let (na3, own, nn) = norms;
        let via_neighbors = inv_degree_sum / (n - 1) as f64 * nn;
        Ok(self.c_sf * self.c_sp.powi(2) * na3 * (own + via_neighbors))
    }

    /// Bound constant for perturbations of node `u`.
    pub fn gamma_hat(&self, u: usize) -> Result<f64, StabilityError> {
        self.gamma_from(u, self.norm_products())
    }

    /// Measure the perturbation ratio over `trials` random (u, v, δ) draws.
    pub fn diagnose(
        &self,
        trials: usize,
        perturb_scale: f64,
        seed: u64,
    ) -> Result<StabilityDiagnostic, StabilityError> {
        let n = self.n_nodes();
        if n < 2 {
            return Err(StabilityError::TooFewNodes(n));
        }
        let mut rng = seeds::stream_rng(seed, "stability-trials", &[]);
        let base_h1 = self.layer1(&self.x);
        let d1 = base_h1.cols();
        let mut sum_h1 = vec![0.0; d1];
        for i in 0..n {
            for (k, s) in sum_h1.iter_mut().enumerate() {
                *s += base_h1.get(i, k);
            }
        }
        let base_h2: Vec<Vec<f64>> = (0..n).map(|i| self.layer2_row(&base_h1, &sum_h1, i)).collect();

        let norms = self.norm_products();
        let gammas: Vec<f64> =
            (0..n).map(|u| self.gamma_from(u, norms)).collect::<Result<_, _>>()?;
        let mut gamma_max = 0.0f64;
        let mut ratio_max = 0.0f64;
        let mut satisfied = true;
        for trial in 0..trials {
            let u = trial % n;
            let mut v = rng.random_range(0..n - 1);
            if v >= u {
                v += 1;
            }
            let gamma = gammas[u];
            gamma_max = gamma_max.max(gamma);

            let mut x_pert = self.x.clone();
            let mut delta_norm_sq = 0.0;
            for k in 0..x_pert.cols() {
                let d: f64 = rng.random_range(-1.0..1.0) * perturb_scale;
                delta_norm_sq += d * d;
                let v0 = x_pert.get(u, k);
                x_pert.set(u, k, v0 + d);
            }
            let delta_norm = delta_norm_sq.sqrt();
            if delta_norm == 0.0 {
                continue;
            }

            // Recompute the perturbed path: h1 at u and its neighbors, the
            // global h1 sum, then h2 at u. The partner keeps its reference h2.
            let pert_h1 = self.layer1(&x_pert);
            let mut sum_pert = sum_h1.clone();
            let mut touched: Vec<usize> = vec![u];
            touched.extend(self.adjacency[u].iter().copied());
            let mut h1_view = base_h1.clone();
            for &i in &touched {
                for k in 0..d1 {
                    sum_pert[k] += pert_h1.get(i, k) - base_h1.get(i, k);
                    h1_view.set(i, k, pert_h1.get(i, k));
                }
            }
            let h2_u = self.layer2_row(&h1_view, &sum_pert, u);

            let z = self.score(&base_h2[u], &base_h2[v]);
            let z_pert = self.score(&h2_u, &base_h2[v]);
            let dz: f64 = z
                .iter()
                .zip(&z_pert)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            let ratio = dz / delta_norm;
            ratio_max = ratio_max.max(ratio);
            if ratio > gamma + 1e-9 {
                satisfied = false;
            }
        }
        Ok(StabilityDiagnostic {
            gamma_hat: gamma_max,
            empirical_ratio: ratio_max,
            trials,
            bound_satisfied: satisfied,
            c_sf: self.c_sf,
            c_sp: self.c_sp,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero_like(m: &CompressedModel) -> CompressedModel {
        let mut z = m.clone();
        for t in [&mut z.a1, &mut z.n1, &mut z.b1, &mut z.a2, &mut z.n2, &mut z.b2, &mut z.a3, &mut z.b3]
        {
            for v in t.data_mut() {
                *v = 0.0;
            }
        }
        z
    }

    #[test]
    fn operator_norm_matches_known_cases() {
        assert!((operator_norm(&Tensor::identity(5)) - 1.0).abs() < 1e-9);
        let diag = Tensor::from_rows(&[vec![3.0, 0.0], vec![0.0, -7.0]]).unwrap();
        assert!((operator_norm(&diag) - 7.0).abs() < 1e-9);
        assert_eq!(operator_norm(&Tensor::zeros(3, 4)), 0.0);
    }

    #[test]
    fn zero_weights_give_zero_bound_and_static_scores() {
        let model = zero_like(&CompressedModel::random(&StabilityConfig::default()).unwrap());
        let d = model.diagnose(100, 1e-3, 9).unwrap();
        assert_eq!(d.gamma_hat, 0.0);
        assert_eq!(d.empirical_ratio, 0.0);
        assert!(d.bound_satisfied);
    }

    #[test]
    fn two_node_identity_bound_is_twice_the_constants() {
        // Two nodes joined by one edge, identity weights, n_j = 1, N = 2:
        // γ = C_sf · C_sp² · 1 · (1·1 + (1/1)/1 · 1·1) = 2 · C_sf · C_sp².
        let cfg = StabilityConfig {
            nodes: 2,
            embed_dim: 3,
            hidden1: 3,
            hidden2: 3,
            classes: 6,
            extra_edges: 0,
            ..Default::default()
        };
        let mut model = CompressedModel::random(&cfg).unwrap();
        model.a1 = Tensor::identity(3);
        model.n1 = Tensor::identity(3);
        model.a2 = Tensor::identity(3);
        model.n2 = Tensor::identity(3);
        model.a3 = Tensor::identity(6);
        assert!((model.gamma_hat(0).unwrap() - 2.0).abs() < 1e-9);
        let scaled = CompressedModel { c_sf: 0.5, c_sp: 2.0, ..model };
        assert!((scaled.gamma_hat(0).unwrap() - 0.5 * 4.0 * 2.0).abs() < 1e-9);
    }

    #[test]
    fn random_ten_node_instances_respect_the_bound() {
        for seed in 0..5 {
            let cfg = StabilityConfig { seed, ..Default::default() };
            let model = CompressedModel::random(&cfg).unwrap();
            let diag = model.diagnose(1000, 1e-3, seed ^ 0xabc).unwrap();
            assert!(
                diag.bound_satisfied,
                "seed {seed}: ratio {} vs gamma {}",
                diag.empirical_ratio, diag.gamma_hat
            );
            assert!(diag.empirical_ratio > 0.0);
        }
    }

    #[test]
    fn single_node_graph_is_rejected() {
        let cfg = StabilityConfig { nodes: 1, ..Default::default() };
        assert!(matches!(CompressedModel::random(&cfg), Err(StabilityError::TooFewNodes(1))));
    }
}
