//! Rank-`r` factorization of transformed layers, parameter and FLOP
//! accounting, layer utilization and the network MLU.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::nn::{LayerDef, NetworkDef};
use crate::ranksearch::SearchOutcome;
use crate::transform::{numerical_rank, NetworkLayerTransform};

/// A linear map split as `left (m x r) · right (r x d)` with the bias on the
/// output stage.
#[derive(Debug, Clone, PartialEq)]
pub struct FactoredLayer {
    pub left: Matrix,
    pub right: Matrix,
    pub bias: Vec<f64>,
    pub r: usize,
}

impl FactoredLayer {
    pub fn product(&self) -> Matrix {
        self.left.matmul(&self.right).expect("factor shapes checked")
    }

    pub fn into_layer(self) -> LayerDef {
        LayerDef::Factored { left: self.left, right: self.right, b: self.bias }
    }
}

/// Truncated SVD split with `Σ^{1/2}` on each side.
pub fn factorize(w_prime: &Matrix, bias: &[f64], r: usize) -> Result<FactoredLayer> {
    let (m, d) = w_prime.shape();
    if r == 0 || r > m.min(d) {
        return Err(Error::Range(format!("factor rank {r} must be in [1, {}]", m.min(d))));
    }
    if bias.len() != m {
        return Err(Error::Dimension(format!("bias has length {}, expected {m}", bias.len())));
    }
    let svd = linalg::svd(w_prime)?;
    let root: Vec<f64> = svd.singular_values[..r].iter().map(|s| s.sqrt()).collect();
    let left = Matrix::from_fn(m, r, |i, j| svd.u[(i, j)] * root[j]);
    let right = Matrix::from_fn(r, d, |i, j| root[i] * svd.vt[(i, j)]);
    Ok(FactoredLayer { left, right, bias: bias.to_vec(), r })
}

/// `r (m + d) ≤ m d`: the factor pair is no larger than the dense layer.
pub fn should_decompose(m: usize, d: usize, r: usize) -> bool {
    r * (m + d) <= m * d
}

/// `(param_ratio, flop_ratio)` of the factored layer against the dense one,
/// counting weights only. Both are 1 when the layer is left dense.
pub fn savings(m: usize, d: usize, r: usize) -> (f64, f64) {
    if should_decompose(m, d, r) {
        let ratio = (r * (m + d)) as f64 / (m * d) as f64;
        (ratio, ratio)
    } else {
        (1.0, 1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerAnalysis {
    pub layer: usize,
    pub m: usize,
    pub d: usize,
    /// Numerical rank of the trained weight.
    pub original_rank: usize,
    /// `min(k_s, k_t)`.
    pub utilized_rank: usize,
    pub utilization: f64,
    pub k_s: usize,
    pub k_t: usize,
    pub e_s: f64,
    pub e_t: f64,
    pub param_ratio: f64,
    pub flop_ratio: f64,
    pub decomposed: bool,
}

impl LayerAnalysis {
    pub fn new(
        layer: usize,
        w: &Matrix,
        k_s: usize,
        k_t: usize,
        e_s: f64,
        e_t: f64,
    ) -> Result<Self> {
        let (m, d) = w.shape();
        if k_s == 0 || k_s > d || k_t == 0 || k_t > m {
            return Err(Error::Structure {
                layer,
                message: format!("subspace dims ({k_s}, {k_t}) out of range for a {m}x{d} layer"),
            });
        }
        let r = k_s.min(k_t);
        let (param_ratio, flop_ratio) = savings(m, d, r);
        Ok(Self {
            layer,
            m,
            d,
            original_rank: numerical_rank(w)?,
            utilized_rank: r,
            utilization: r as f64 / m.min(d) as f64,
            k_s,
            k_t,
            e_s,
            e_t,
            param_ratio,
            flop_ratio,
            decomposed: should_decompose(m, d, r),
        })
    }

    pub fn max_rank(&self) -> usize {
        self.m.min(self.d)
    }

    /// Weights and bias after the profitable-only factorization.
    pub fn final_parameters(&self) -> usize {
        let weights = if self.decomposed { self.utilized_rank * (self.m + self.d) } else { self.m * self.d };
        weights + self.m
    }
}

/// Analyses for a searched network; `original` supplies the trained weights.
pub fn analyses_from_search(original: &NetworkDef, outcome: &SearchOutcome) -> Result<Vec<LayerAnalysis>> {
    let layers = original.linear_layers();
    if layers.len() != outcome.layers.len() {
        return Err(Error::Structure {
            layer: layers.len().min(outcome.layers.len()),
            message: format!("network has {} linear layers, outcome has {}", layers.len(), outcome.layers.len()),
        });
    }
    layers
        .iter()
        .zip(&outcome.layers)
        .map(|(l, s)| {
            let w = l.weight().expect("linear layer");
            if w.shape() != (s.m, s.d) {
                return Err(Error::Structure { layer: s.layer, message: "outcome shape does not match network".into() });
            }
            LayerAnalysis::new(s.layer, &w, s.k_s, s.k_t, s.e_s, s.e_t)
        })
        .collect()
}

pub fn analyses_from_transforms(transforms: &[NetworkLayerTransform]) -> Result<Vec<LayerAnalysis>> {
    transforms
        .iter()
        .map(|t| {
            let g = &t.transform;
            LayerAnalysis::new(t.layer, &t.w, g.k_s, g.k_t, g.e_s, g.e_t)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Accuracies {
    pub original: Option<f64>,
    pub transformed: Option<f64>,
    pub finetuned: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilizationReport {
    pub layers: Vec<LayerAnalysis>,
    pub mlu: f64,
    /// Factored over dense linear weights, summed over layers.
    pub total_param_ratio: f64,
    pub total_flop_ratio: f64,
    /// Linear-layer parameters (weights and biases) before and after the
    /// profitable-only factorization.
    pub original_parameters: usize,
    pub final_parameters: usize,
    pub accuracies: Accuracies,
    pub epsilon: Option<f64>,
    pub evaluations: Option<usize>,
}

pub fn build_report(
    outcome: Option<&SearchOutcome>,
    analyses: &[LayerAnalysis],
    accuracies: Accuracies,
) -> Result<UtilizationReport> {
    if analyses.is_empty() {
        return Err(Error::Degenerate("no layers to report".into()));
    }
    let mut layers = analyses.to_vec();
    layers.sort_by_key(|a| a.layer);
    let mlu = layers.iter().map(|a| a.utilization).sum::<f64>() / layers.len() as f64;
    let dense: usize = layers.iter().map(|a| a.m * a.d).sum();
    let kept: f64 = layers.iter().map(|a| a.param_ratio * (a.m * a.d) as f64).sum();
    let flops: f64 = layers.iter().map(|a| a.flop_ratio * (a.m * a.d) as f64).sum();
    Ok(UtilizationReport {
        mlu,
        total_param_ratio: kept / dense as f64,
        total_flop_ratio: flops / dense as f64,
        original_parameters: layers.iter().map(|a| a.m * a.d + a.m).sum(),
        final_parameters: layers.iter().map(LayerAnalysis::final_parameters).sum(),
        accuracies,
        epsilon: outcome.map(|o| o.epsilon),
        evaluations: outcome.map(|o| o.evaluations),
        layers,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FactorPolicy {
    /// Factor only layers where the pair is no larger than the dense layer.
    Profitable,
    /// Factor every layer, pinning its rank for finetuning.
    All,
}

/// Replaces linear layers of `net` (typically the transformed network) by
/// rank-`utilized_rank` factor pairs according to `policy`; the rest become
/// dense layers holding their current map.
pub fn apply_factorization(net: &NetworkDef, analyses: &[LayerAnalysis], policy: FactorPolicy) -> Result<NetworkDef> {
    let mut out = net.clone();
    let mut layers = out.linear_layers_mut();
    if layers.len() != analyses.len() {
        return Err(Error::Structure {
            layer: layers.len().min(analyses.len()),
            message: format!("network has {} linear layers, got {} analyses", layers.len(), analyses.len()),
        });
    }
    for (i, (layer, a)) in layers.iter_mut().zip(analyses).enumerate() {
        if a.layer != i || layer.linear_shape() != Some((a.m, a.d)) {
            return Err(Error::Structure { layer: i, message: "analysis does not match layer shape".into() });
        }
        let factor = match policy {
            FactorPolicy::All => true,
            FactorPolicy::Profitable => a.decomposed,
        };
        if let LayerDef::Factored { left, .. } = &**layer {
            if factor && left.cols() == a.utilized_rank {
                continue;
            }
        }
        let w = layer.weight().expect("linear layer");
        let b = layer.bias().expect("linear layer").to_vec();
        **layer = if factor { factorize(&w, &b, a.utilized_rank)?.into_layer() } else { LayerDef::Linear { w, b } };
    }
    Ok(out)
}

/// Folds every factored layer whose pair is larger than the dense layer back
/// into a dense one; the map is unchanged.
pub fn merge_unprofitable(net: &NetworkDef) -> NetworkDef {
    let mut out = net.clone();
    for layer in out.linear_layers_mut() {
        if let LayerDef::Factored { left, right, b } = &*layer {
            if !should_decompose(left.rows(), right.cols(), left.cols()) {
                let w = left.matmul(right).expect("factor shapes checked");
                *layer = LayerDef::Linear { w, b: b.clone() };
            }
        }
    }
    out
}
