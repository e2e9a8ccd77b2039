//! Per-layer binary search for the smallest input and output subspace
//! dimensions that keep validation accuracy within a tolerance.
//!
//! Layers are processed first to last, input side then output side. Each
//! selected projection is fixed into the network before the next search, and
//! each search compares against the accuracy of the network as transformed so
//! far, so the per-transformation tolerance `ε` adds up to at most `2·L·ε`
//! points over `L` layers.
//!
//! The search variable is the integer dimension `k`. The predicate
//! "accuracy ≥ reference − ε" is assumed monotone in `k`; since that is only
//! approximately true, the chosen `k` is re-evaluated and, if it fails, grown
//! one step at a time until it passes. Those extra steps are counted as
//! fallbacks.

use serde::{Deserialize, Serialize};

use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::nn::{evaluate, NetworkDef};
use crate::subspace::{Projector, Spectrum};
use crate::transform::layer_grams;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankSearchConfig {
    /// Allowed accuracy drop per transformation, in percentage points.
    pub epsilon: f64,
    /// Cap on binary-search probes per transformation.
    pub max_depth: usize,
}

impl Default for RankSearchConfig {
    fn default() -> Self {
        Self { epsilon: 0.1, max_depth: 32 }
    }
}

impl RankSearchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Range(format!("epsilon {} must be >= 0", self.epsilon)));
        }
        if self.max_depth == 0 {
            return Err(Error::Range("max_depth must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Input,
    Output,
}

impl std::fmt::Display for Side {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Side::Input => "input",
            Side::Output => "output",
        })
    }
}

/// Result of searching one projection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformationSearch {
    pub layer: usize,
    pub side: Side,
    pub dim: usize,
    pub k: usize,
    /// Spectral energy retained at `k`.
    pub energy: f64,
    pub reference_accuracy: f64,
    pub accuracy: f64,
    /// Validation passes spent, including the reference and the re-check.
    pub evaluations: usize,
    pub fallbacks: usize,
}

impl TransformationSearch {
    /// `⌈log₂ dim⌉ + 2`: the probe budget of a fallback-free search.
    pub fn evaluation_bound(&self) -> usize {
        log2_ceil(self.dim) + 2
    }
}

pub(crate) fn log2_ceil(n: usize) -> usize {
    if n <= 1 {
        0
    } else {
        (usize::BITS - (n - 1).leading_zeros()) as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSearch {
    pub layer: usize,
    pub m: usize,
    pub d: usize,
    pub k_s: usize,
    pub k_t: usize,
    pub e_s: f64,
    pub e_t: f64,
}

impl LayerSearch {
    pub fn utilized_rank(&self) -> usize {
        self.k_s.min(self.k_t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchOutcome {
    pub epsilon: f64,
    pub layers: Vec<LayerSearch>,
    pub transformations: Vec<TransformationSearch>,
    pub evaluations: usize,
    pub fallbacks: usize,
    pub baseline_accuracy: f64,
    pub final_accuracy: f64,
}

impl SearchOutcome {
    /// Accuracy drop in percentage points.
    pub fn drop_points(&self) -> f64 {
        100.0 * (self.baseline_accuracy - self.final_accuracy)
    }

    /// `2 · L · ε` points.
    pub fn budget_points(&self) -> f64 {
        2.0 * self.layers.len() as f64 * self.epsilon
    }
}

pub struct SearchResult {
    pub outcome: SearchOutcome,
    /// The network with every selected projection applied.
    pub network: NetworkDef,
}

fn side_gram(net: &NetworkDef, layer: usize, side: Side, analysis: &Matrix) -> Result<Matrix> {
    let mut grams = layer_grams(net, analysis)?;
    if layer >= grams.len() {
        return Err(Error::Structure { layer, message: format!("network has {} linear layers", grams.len()) });
    }
    let (gx, gy) = grams.swap_remove(layer);
    Ok(match side {
        Side::Input => gx,
        Side::Output => gy,
    })
}

/// `W P_S` (input side) or `P_T W` (output side) with the top-`k` basis of
/// `spectrum`. The full dimension leaves `W` untouched.
fn project(w: &Matrix, spectrum: &Spectrum, side: Side, k: usize, vectors: &Matrix) -> Result<Matrix> {
    if k >= spectrum.dim() {
        return Ok(w.clone());
    }
    let p = Projector::from_rows(&vectors.top_rows(k));
    match side {
        Side::Input => w.matmul(&p.p),
        Side::Output => p.p.matmul(w),
    }
}

/// Searches one projection of linear layer `layer` and returns the search
/// record with the network that has the chosen projection applied.
///
/// Grams come from the current network's activations on `analysis`;
/// accuracy is measured on `val`.
pub fn search_transformation(
    net: &NetworkDef,
    layer: usize,
    side: Side,
    analysis: &Matrix,
    val: &Dataset,
    config: &RankSearchConfig,
) -> Result<(TransformationSearch, NetworkDef)> {
    config.validate()?;
    let gram = side_gram(net, layer, side, analysis)?;
    let spectrum = Spectrum::of_gram(&gram)?;
    let dim = spectrum.dim();
    let vectors = spectrum.basis_for_dim(dim)?.vectors;
    let w = net.linear_layers()[layer].weight().expect("linear layer");
    let tolerance = config.epsilon / 100.0;

    let mut evaluations = 0;
    let mut accuracy_at = |k: usize| -> Result<(f64, NetworkDef)> {
        let mut candidate = net.clone();
        candidate.set_linear_weight(layer, project(&w, &spectrum, side, k, &vectors)?)?;
        evaluations += 1;
        Ok((evaluate(&candidate, val)?, candidate))
    };

    let reference = {
        let (acc, _) = accuracy_at(dim)?;
        acc
    };
    let passes = |acc: f64| acc >= reference - tolerance;

    let (mut lo, mut hi) = (1, dim);
    let mut depth = 0;
    while lo < hi && depth < config.max_depth {
        let mid = lo + (hi - lo) / 2;
        let (acc, _) = accuracy_at(mid)?;
        if passes(acc) {
            hi = mid;
        } else {
            lo = mid + 1;
        }
        depth += 1;
    }

    let mut k = hi;
    let mut fallbacks = 0;
    let (mut acc, mut chosen) = accuracy_at(k)?;
    while !passes(acc) {
        if k >= dim {
            return Err(Error::SearchInfeasible { layer, side: side.to_string() });
        }
        k += 1;
        fallbacks += 1;
        (acc, chosen) = accuracy_at(k)?;
    }

    let record = TransformationSearch {
        layer,
        side,
        dim,
        k,
        energy: spectrum.energy_at(k),
        reference_accuracy: reference,
        accuracy: acc,
        evaluations,
        fallbacks,
    };
    Ok((record, chosen))
}

/// Searches every linear layer, input then output side, fixing each choice
/// before moving on.
pub fn search_network(
    net: &NetworkDef,
    analysis: &Matrix,
    val: &Dataset,
    config: &RankSearchConfig,
) -> Result<SearchResult> {
    config.validate()?;
    if val.is_empty() {
        return Err(Error::Degenerate("validation set is empty".into()));
    }
    let baseline_accuracy = evaluate(net, val)?;
    let mut current = net.clone();
    let mut transformations = Vec::new();
    let mut layers = Vec::new();
    for layer in 0..net.linear_count() {
        let (m, d) = net.linear_layers()[layer].linear_shape().expect("linear layer");
        let (input, after_input) = search_transformation(&current, layer, Side::Input, analysis, val, config)?;
        let (output, after_output) =
            search_transformation(&after_input, layer, Side::Output, analysis, val, config)?;
        current = after_output;
        layers.push(LayerSearch { layer, m, d, k_s: input.k, k_t: output.k, e_s: input.energy, e_t: output.energy });
        transformations.push(input);
        transformations.push(output);
    }
    let final_accuracy = transformations.last().map_or(baseline_accuracy, |t| t.accuracy);
    let outcome = SearchOutcome {
        epsilon: config.epsilon,
        evaluations: transformations.iter().map(|t| t.evaluations).sum(),
        fallbacks: transformations.iter().map(|t| t.fallbacks).sum(),
        layers,
        transformations,
        baseline_accuracy,
        final_accuracy,
    };
    Ok(SearchResult { outcome, network: current })
}

/// Re-applies the projections recorded in `outcome` to `net`, recomputing
/// the Grams on `analysis` in the same order the search used. On the
/// network and data the search ran on, this reproduces its network exactly.
pub fn apply_outcome(net: &NetworkDef, analysis: &Matrix, outcome: &SearchOutcome) -> Result<NetworkDef> {
    if outcome.layers.len() != net.linear_count() {
        return Err(Error::Structure {
            layer: outcome.layers.len().min(net.linear_count()),
            message: format!("outcome covers {} layers, network has {}", outcome.layers.len(), net.linear_count()),
        });
    }
    let mut current = net.clone();
    for l in &outcome.layers {
        for (side, k) in [(Side::Input, l.k_s), (Side::Output, l.k_t)] {
            let spectrum = Spectrum::of_gram(&side_gram(&current, l.layer, side, analysis)?)?;
            if k == 0 || k > spectrum.dim() {
                return Err(Error::Structure { layer: l.layer, message: format!("{side} dimension {k} out of range") });
            }
            let vectors = spectrum.basis_for_dim(spectrum.dim())?.vectors;
            let w = current.linear_layers()[l.layer].weight().expect("linear layer");
            current.set_linear_weight(l.layer, project(&w, &spectrum, side, k, &vectors)?)?;
        }
    }
    Ok(current)
}
