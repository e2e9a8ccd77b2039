//! Weight transformation onto the data's input and output subspaces.
//!
//! A layer computes `Y = X Wᵀ` with `W` stored `m x d`. Projecting the input
//! onto `S` and the output onto `T` is the same as running the layer with
//! `W' = P_T W P_S`. The rank of `W'` is the *utilized rank*: the part of the
//! weight space that actually meets the data. The forward-pass error of the
//! substitution satisfies
//!
//! ```text
//! ‖X Wᵀ − X W'ᵀ‖² ≤ (1 − e_T)‖Y‖² + (1 − e_S)‖X‖²‖W‖²
//! ```
//!
//! where `e_S`, `e_T` are the spectral energy fractions the two subspaces
//! retain. The pieces of that argument (the orthogonal split, the vanishing
//! cross term, the final inequality) are each exposed so they can be checked
//! numerically.

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::nn::{linear_io, NetworkDef};
use crate::subspace::{output_gram, GramAccumulator, Projector, SpectralBasis, Spectrum};

/// Energy share used to read a numerical rank off a singular value ladder.
pub const RANK_ENERGY: f64 = 0.9999;

/// Full record of a transformed layer.
#[derive(Debug, Clone)]
pub struct TransformedLayer {
    /// `m x d`.
    pub w_prime: Matrix,
    pub utilized_rank: usize,
    pub k_s: usize,
    pub k_t: usize,
    pub e_s: f64,
    pub e_t: f64,
    pub bound: f64,
    pub empirical_error: f64,
    /// `Tr(Y P_T⊥ P_T W X_S⊥ᵀ)`, zero up to rounding.
    pub cross_term: f64,
    pub p_s: Projector,
    pub p_t: Projector,
}

/// `P_T W P_S`.
pub fn transform_weight(w: &Matrix, p_s: &Projector, p_t: &Projector) -> Result<Matrix> {
    let (m, d) = w.shape();
    if p_s.dim() != d || p_t.dim() != m {
        return Err(Error::Dimension(format!(
            "weight is {m}x{d}, projectors act on {} (input) and {} (output)",
            p_s.dim(),
            p_t.dim()
        )));
    }
    p_t.p.matmul(w)?.matmul(&p_s.p)
}

/// Count of leading singular values needed to explain 99.99% of the energy.
pub fn numerical_rank(m: &Matrix) -> Result<usize> {
    Ok(rank_for_energy(&linalg::singular_values(m)?, RANK_ENERGY))
}

/// Smallest `k` with `Σ_{i<k} σᵢ² ≥ fraction · Σ σᵢ²`; zero for an all-zero ladder.
pub fn rank_for_energy(singular_values: &[f64], fraction: f64) -> usize {
    let energies: Vec<f64> = singular_values.iter().map(|s| s * s).collect();
    let total: f64 = energies.iter().sum();
    if total == 0.0 {
        return 0;
    }
    let mut acc = 0.0;
    for (i, e) in energies.iter().enumerate() {
        acc += e;
        if acc >= fraction * total {
            return i + 1;
        }
    }
    energies.len()
}

/// `(1 − e_t)‖Y‖² + (1 − e_s)‖X‖²‖W‖²`.
pub fn error_bound(e_s: f64, e_t: f64, x_norm_sq: f64, y_norm_sq: f64, w_norm_sq: f64) -> Result<f64> {
    for (name, e) in [("e_s", e_s), ("e_t", e_t)] {
        if !(0.0..=1.0).contains(&e) {
            return Err(Error::Range(format!("{name} = {e} is not a fraction")));
        }
    }
    for (name, n) in [("‖X‖²", x_norm_sq), ("‖Y‖²", y_norm_sq), ("‖W‖²", w_norm_sq)] {
        if n.is_nan() || n < 0.0 {
            return Err(Error::Range(format!("{name} = {n} is negative")));
        }
    }
    Ok((1.0 - e_t) * y_norm_sq + (1.0 - e_s) * x_norm_sq * w_norm_sq)
}

/// `‖X Wᵀ − X W'ᵀ‖²`.
pub fn empirical_error(x: &Matrix, w: &Matrix, w_prime: &Matrix) -> Result<f64> {
    if w.shape() != w_prime.shape() {
        return Err(Error::Dimension(format!(
            "W is {:?} but W' is {:?}",
            w.shape(),
            w_prime.shape()
        )));
    }
    if x.cols() != w.cols() {
        return Err(Error::Dimension(format!(
            "X has {} columns, W expects {}",
            x.cols(),
            w.cols()
        )));
    }
    Ok(x.matmul_t(&w.sub(w_prime)?)?.frobenius_sq())
}

/// The cross term `Tr(Y P_T⊥ P_T W X_S⊥ᵀ)` of the error expansion.
pub fn cross_term(y: &Matrix, p_t: &Projector, w: &Matrix, x_s_perp: &Matrix) -> Result<f64> {
    let left = y.matmul(&p_t.complement().p)?.matmul(&p_t.p)?.matmul(w)?;
    // Tr(A Bᵀ) = Σ_ij A_ij B_ij
    if left.shape() != x_s_perp.shape() {
        return Err(Error::Dimension(format!(
            "cross term factors are {:?} and {:?}",
            left.shape(),
            x_s_perp.shape()
        )));
    }
    Ok(linalg::dot(left.data(), x_s_perp.data()))
}

/// Builds `S` from `X`'s Gram and `T` from the Gram of `Y = X Wᵀ`, transforms
/// `W`, and evaluates the bound and the realized error on `X` itself.
pub fn analyze_layer(x: &Matrix, w: &Matrix, e_s_target: f64, e_t_target: f64) -> Result<TransformedLayer> {
    if x.cols() != w.cols() {
        return Err(Error::Dimension(format!(
            "X has {} columns, W is {}x{}",
            x.cols(),
            w.rows(),
            w.cols()
        )));
    }
    if x.is_zero() {
        return Err(Error::Degenerate("layer input is all zeros".into()));
    }
    if w.is_zero() {
        return Err(Error::Degenerate("layer weight is all zeros".into()));
    }
    let y = x.matmul_t(w)?;
    let s = Spectrum::of_gram(&x.gram())?.basis_for_energy(e_s_target)?;
    let t = Spectrum::of_gram(&y.gram())
        .and_then(|sp| sp.basis_for_energy(e_t_target))
        .map_err(|e| match e {
            Error::Degenerate(_) => Error::Degenerate("layer output is all zeros".into()),
            other => other,
        })?;
    transform_with_bases(x, &y, w, &s, &t)
}

fn transform_with_bases(
    x: &Matrix,
    y: &Matrix,
    w: &Matrix,
    s: &SpectralBasis,
    t: &SpectralBasis,
) -> Result<TransformedLayer> {
    let p_s = Projector::from_rows(&s.vectors);
    let p_t = Projector::from_rows(&t.vectors);
    let w_prime = transform_weight(w, &p_s, &p_t)?;
    let bound = error_bound(
        s.achieved_energy,
        t.achieved_energy,
        x.frobenius_sq(),
        y.frobenius_sq(),
        w.frobenius_sq(),
    )?;
    let empirical_error = empirical_error(x, w, &w_prime)?;
    let x_s_perp = x.matmul(&p_s.complement().p)?;
    let cross_term = cross_term(y, &p_t, w, &x_s_perp)?;
    Ok(TransformedLayer {
        w_prime,
        utilized_rank: s.k.min(t.k),
        k_s: s.k,
        k_t: t.k,
        e_s: s.achieved_energy,
        e_t: t.achieved_energy,
        bound,
        empirical_error,
        cross_term,
        p_s,
        p_t,
    })
}

/// Transformation driven by precomputed Grams, for layers analyzed from
/// streamed activations (including layers with bias, whose output Gram must
/// be accumulated from the forward pass).
#[derive(Debug, Clone)]
pub struct GramTransform {
    pub w_prime: Matrix,
    pub k_s: usize,
    pub k_t: usize,
    pub e_s: f64,
    pub e_t: f64,
}

impl GramTransform {
    pub fn utilized_rank(&self) -> usize {
        self.k_s.min(self.k_t)
    }
}

pub fn transform_from_grams(
    gram_x: &Matrix,
    gram_y: &Matrix,
    w: &Matrix,
    e_s_target: f64,
    e_t_target: f64,
) -> Result<GramTransform> {
    let s = Spectrum::of_gram(gram_x)?.basis_for_energy(e_s_target)?;
    let t = Spectrum::of_gram(gram_y)?.basis_for_energy(e_t_target)?;
    let w_prime = transform_weight(w, &Projector::from_rows(&s.vectors), &Projector::from_rows(&t.vectors))?;
    Ok(GramTransform { w_prime, k_s: s.k, k_t: t.k, e_s: s.achieved_energy, e_t: t.achieved_energy })
}

/// Input and output Grams of every linear layer, accumulated over the rows of
/// `x` in batches.
///
/// The input Gram is summed directly. The output Gram is transported as
/// `W G_X Wᵀ` when the layer has no bias; with a bias it is summed from the
/// forward pass.
pub fn layer_grams(net: &NetworkDef, x: &Matrix) -> Result<Vec<(Matrix, Matrix)>> {
    const BATCH: usize = 256;
    let mut accs: Option<Vec<(GramAccumulator, GramAccumulator)>> = None;
    let rows: Vec<usize> = (0..x.rows()).collect();
    for chunk in rows.chunks(BATCH) {
        let io = linear_io(net, &x.select_rows(chunk))?;
        let accs = accs.get_or_insert_with(|| {
            io.iter()
                .map(|l| (GramAccumulator::new(l.input.cols()), GramAccumulator::new(l.output.cols())))
                .collect()
        });
        for ((gx, gy), l) in accs.iter_mut().zip(&io) {
            gx.accumulate(&l.input)?;
            gy.accumulate(&l.output)?;
        }
    }
    let accs = accs.ok_or_else(|| Error::Degenerate("no samples to analyze".into()))?;
    net.linear_layers()
        .iter()
        .zip(accs)
        .map(|(layer, (gx, gy))| {
            let gx = gx.into_gram();
            let bias_free = layer.bias().is_some_and(|b| b.iter().all(|&v| v == 0.0));
            let gy = if bias_free {
                output_gram(&gx, &layer.weight().expect("linear layer"))?
            } else {
                gy.into_gram()
            };
            Ok((gx, gy))
        })
        .collect()
}

/// Fixed-energy transform of one linear layer of a network.
#[derive(Debug, Clone)]
pub struct NetworkLayerTransform {
    pub layer: usize,
    pub w: Matrix,
    pub transform: GramTransform,
}

/// Applies [`transform_from_grams`] to every linear layer with Grams taken
/// from the (untransformed) network's activations on `x`.
pub fn analyze_network(net: &NetworkDef, x: &Matrix, e_s: f64, e_t: f64) -> Result<Vec<NetworkLayerTransform>> {
    let grams = layer_grams(net, x)?;
    net.linear_layers()
        .iter()
        .zip(&grams)
        .enumerate()
        .map(|(layer, (l, (gx, gy)))| {
            let w = l.weight().expect("linear layer");
            let transform = transform_from_grams(gx, gy, &w, e_s, e_t)?;
            Ok(NetworkLayerTransform { layer, w, transform })
        })
        .collect()
}
