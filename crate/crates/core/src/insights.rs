//! Measurements of how training interacts with the data subspaces:
//! initialization split, gradient confinement, weight decay on the
//! complement, ReLU and skip spectra, mixup span, low-rank initialization.

use std::io::Write;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::datagen::{generate, Dataset, SyntheticSpec};
use crate::decompose::{analyses_from_transforms, build_report, Accuracies};
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::nn::{
    evaluate, linear_io, logits, loss_and_grad, mixup_batch, one_hot, sgd_step, LayerDef, LayerGrad, NetworkDef,
    TrainConfig, Trainer,
};
use crate::rng;
use crate::subspace::{basis_for_energy, energy_split, projector, Projector, Spectrum};
use crate::transform::{analyze_network, layer_grams};

/// Energy level used to pick `S` in traces and spectra.
pub const TRACE_ENERGY: f64 = 0.99;

/// Projector onto the exact row span of `x`.
pub fn span_projector(x: &Matrix) -> Result<Projector> {
    Ok(projector(&basis_for_energy(&x.gram(), 1.0)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyRecord {
    pub epoch: usize,
    pub layer: usize,
    /// `‖W P_S‖² / ‖W‖²`.
    pub in_fraction: f64,
    /// `‖W P_{S⊥}‖² / ‖W‖²`.
    pub perp_fraction: f64,
    pub k_s: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EnergyTrace {
    pub records: Vec<EnergyRecord>,
}

impl EnergyTrace {
    /// Records of the current network, with `S` recomputed from its
    /// activations on `x`.
    fn push_epoch(&mut self, net: &NetworkDef, x: &Matrix, epoch: usize) -> Result<()> {
        for (layer, ((gx, _), l)) in layer_grams(net, x)?.iter().zip(net.linear_layers()).enumerate() {
            let basis = basis_for_energy(gx, TRACE_ENERGY)?;
            let (in_fraction, perp_fraction) = energy_split(&l.weight().expect("linear layer"), &projector(&basis))?;
            self.records.push(EnergyRecord { epoch, layer, in_fraction, perp_fraction, k_s: basis.k });
        }
        Ok(())
    }

    pub fn layer(&self, layer: usize) -> impl Iterator<Item = &EnergyRecord> {
        self.records.iter().filter(move |r| r.layer == layer)
    }
}

fn std_dev(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayRun {
    pub weight_decay: f64,
    pub trace: EnergyTrace,
    /// First layer, `S⊥` the exact complement of the input span.
    pub perp_init: Vec<f64>,
    pub perp_final: Vec<f64>,
    pub init_perp_std: f64,
    pub final_perp_std: f64,
    /// First-layer perp fraction at the last epoch.
    pub final_perp_fraction: f64,
    /// MLU of the trained network at `TRACE_ENERGY` on both sides.
    pub mlu: f64,
    pub final_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightDecayExperiment {
    pub without: DecayRun,
    pub with: DecayRun,
}

impl WeightDecayExperiment {
    /// Both traces, one row per epoch and layer.
    pub fn write_trace_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["weight_decay", "epoch", "layer", "in_fraction", "perp_fraction", "k_s"])?;
        for run in [&self.without, &self.with] {
            for r in &run.trace.records {
                w.write_record([
                    format!("{:.16e}", run.weight_decay),
                    r.epoch.to_string(),
                    r.layer.to_string(),
                    format!("{:.16e}", r.in_fraction),
                    format!("{:.16e}", r.perp_fraction),
                    r.k_s.to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Side-by-side histogram of first-layer `W P_{S⊥}` entries: at
    /// initialization and after training without and with decay.
    pub fn write_histogram_csv<W: Write>(&self, out: W, bins: usize) -> Result<()> {
        let all = self.without.perp_init.iter().chain(&self.without.perp_final).chain(&self.with.perp_final);
        let (lo, hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let init = histogram(&self.without.perp_init, lo, hi, bins);
        let off = histogram(&self.without.perp_final, lo, hi, bins);
        let on = histogram(&self.with.perp_final, lo, hi, bins);
        let width = (hi - lo) / bins as f64;
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["bin_lo", "bin_hi", "init", "final_without_decay", "final_with_decay"])?;
        for i in 0..bins {
            w.write_record([
                format!("{:.16e}", lo + i as f64 * width),
                format!("{:.16e}", lo + (i + 1) as f64 * width),
                init[i].to_string(),
                off[i].to_string(),
                on[i].to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Counts of `values` in `bins` equal-width bins over `[lo, hi]`.
pub fn histogram(values: &[f64], lo: f64, hi: f64, bins: usize) -> Vec<usize> {
    let mut counts = vec![0; bins.max(1)];
    let last = counts.len() - 1;
    let width = (hi - lo) / counts.len() as f64;
    for &v in values {
        let i = if width > 0.0 { ((v - lo) / width) as usize } else { 0 };
        counts[i.min(last)] += 1;
    }
    counts
}

fn decay_run(net: &NetworkDef, config: &TrainConfig, data: &Dataset) -> Result<DecayRun> {
    let perp = span_projector(&data.x)?.complement();
    let first_perp = |n: &NetworkDef| -> Result<Vec<f64>> {
        Ok(n.linear_layers()[0].weight().expect("linear layer").matmul(&perp.p)?.into_data())
    };
    let perp_init = first_perp(net)?;
    let mut trace = EnergyTrace::default();
    trace.push_epoch(net, &data.x, 0)?;
    let mut trainer = Trainer::new(net.clone(), config.clone())?;
    for _ in 0..config.epochs {
        trainer.run_epoch(data)?;
        trace.push_epoch(trainer.network(), &data.x, trainer.epoch())?;
    }
    let trained = trainer.into_network();
    let perp_final = first_perp(&trained)?;
    let analyses = analyses_from_transforms(&analyze_network(&trained, &data.x, TRACE_ENERGY, TRACE_ENERGY)?)?;
    let mlu = build_report(None, &analyses, Accuracies::default())?.mlu;
    let final_perp_fraction = trace.layer(0).last().expect("epoch 0 recorded").perp_fraction;
    Ok(DecayRun {
        weight_decay: config.weight_decay,
        init_perp_std: std_dev(&perp_init),
        final_perp_std: std_dev(&perp_final),
        perp_init,
        perp_final,
        trace,
        final_perp_fraction,
        mlu,
        final_accuracy: evaluate(&trained, data)?,
    })
}

/// Trains `net` twice with the same seed, once with no weight decay and once
/// with `lambda_on`, tracing the input-subspace energy split per epoch.
pub fn run_weight_decay_experiment(
    net: &NetworkDef,
    base: &TrainConfig,
    lambda_on: f64,
    data: &Dataset,
) -> Result<WeightDecayExperiment> {
    if lambda_on.is_nan() || lambda_on <= 0.0 {
        return Err(Error::Range(format!("weight decay {lambda_on} must be positive")));
    }
    let without = decay_run(net, &TrainConfig { weight_decay: 0.0, ..base.clone() }, data)?;
    let with = decay_run(net, &TrainConfig { weight_decay: lambda_on, ..base.clone() }, data)?;
    Ok(WeightDecayExperiment { without, with })
}

/// A self-contained weight-decay experiment: planted data, an MLP, and the
/// shared training setup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecaySetup {
    pub data: SyntheticSpec,
    pub hidden: Vec<usize>,
    pub training: TrainConfig,
    pub lambda_on: f64,
}

impl DecaySetup {
    /// Rank-3 data in 16 dimensions with ambient noise, two hidden layers of
    /// 32, long enough training for the decay to act.
    pub fn standard(seed: u64) -> Self {
        Self {
            data: SyntheticSpec {
                ambient_dim: 16,
                intrinsic_rank: 3,
                classes: 4,
                samples_per_class: 50,
                noise_sigma: 0.3,
                seed,
            },
            hidden: vec![32, 32],
            training: TrainConfig { learning_rate: 0.2, epochs: 150, batch_size: 8, seed, ..Default::default() },
            lambda_on: 5e-4,
        }
    }

    pub fn run(&self) -> Result<WeightDecayExperiment> {
        let data = generate(&self.data)?;
        let net = NetworkDef::mlp(data.dim(), &self.hidden, self.data.classes, self.training.seed);
        run_weight_decay_experiment(&net, &self.training, self.lambda_on, &data)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayClosedForm {
    /// `‖W_t P_{S⊥}‖ / ‖W_0 P_{S⊥}‖` for `t = 0..=steps`.
    pub ratios: Vec<f64>,
    /// `(1 − ηλ)^t`.
    pub expected: Vec<f64>,
    pub max_abs_error: f64,
}

/// Full-batch SGD on a single linear layer with fixed inputs `x`: the
/// complement component of the weight only decays.
pub fn decay_closed_form(
    w0: &Matrix,
    x: &Matrix,
    labels: &[usize],
    learning_rate: f64,
    weight_decay: f64,
    steps: usize,
) -> Result<DecayClosedForm> {
    let (m, d) = w0.shape();
    let mut net = NetworkDef::new(d, vec![LayerDef::linear(w0.clone(), vec![0.0; m])])?;
    let perp = span_projector(x)?.complement();
    let perp_norm = |n: &NetworkDef| -> Result<f64> {
        Ok(n.linear_layers()[0].weight().expect("linear layer").matmul(&perp.p)?.frobenius())
    };
    let base = perp_norm(&net)?;
    if base == 0.0 {
        return Err(Error::Degenerate("initial weight has no component outside the input span".into()));
    }
    let config = TrainConfig { learning_rate, weight_decay, ..Default::default() };
    let mut ratios = vec![1.0];
    for _ in 0..steps {
        let (_, grads) = loss_and_grad(&net, x, labels)?;
        sgd_step(&mut net, &grads, &config)?;
        ratios.push(perp_norm(&net)? / base);
    }
    let expected: Vec<f64> = (0..=steps).map(|t| (1.0 - learning_rate * weight_decay).powi(t as i32)).collect();
    let max_abs_error = ratios.iter().zip(&expected).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    Ok(DecayClosedForm { ratios, expected, max_abs_error })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitSplit {
    pub m: usize,
    pub d: usize,
    pub k: usize,
    /// `(d − k) / d`.
    pub expected: f64,
    pub fractions: Vec<f64>,
    pub mean: f64,
}

/// Random orthonormal `k x d` basis.
pub fn random_basis(k: usize, d: usize, rng: &mut rng::Rng) -> Result<Matrix> {
    let mut rows = rng::gaussian_matrix(k, d, 1.0, rng).to_rows();
    linalg::orthonormalize(&mut rows);
    Matrix::from_rows(&rows)
}

/// Perp-energy fraction of a freshly initialized `m x d` layer against a
/// random `k`-dimensional subspace, over `seeds`.
pub fn init_split(m: usize, d: usize, k: usize, seeds: &[u64]) -> Result<InitSplit> {
    if k == 0 || k > d || seeds.is_empty() {
        return Err(Error::Range(format!("need 1 <= k <= d and at least one seed (k = {k}, d = {d})")));
    }
    let fractions = seeds
        .iter()
        .map(|&seed| {
            let mut r = rng::seeded(seed);
            let basis = random_basis(k, d, &mut r)?;
            let w = LayerDef::init_linear(m, d, &mut r).weight().expect("linear layer");
            Ok(energy_split(&w, &Projector::from_rows(&basis))?.1)
        })
        .collect::<Result<Vec<f64>>>()?;
    let mean = fractions.iter().sum::<f64>() / fractions.len() as f64;
    Ok(InitSplit { m, d, k, expected: (d - k) as f64 / d as f64, fractions, mean })
}

/// `‖G P_{S⊥}‖_F / ‖G‖_F`, or `None` for a zero gradient.
pub fn gradient_residual(grad: &Matrix, perp: &Projector) -> Result<Option<f64>> {
    let norm = grad.frobenius();
    if norm == 0.0 {
        return Ok(None);
    }
    Ok(Some(grad.matmul(&perp.p)?.frobenius() / norm))
}

/// Input-side weight gradients per linear layer: `∇W` for dense layers and
/// `∇R` (the `r x d` factor) for factored ones.
fn input_side_grads(grads: &[LayerGrad], out: &mut Vec<Matrix>) {
    for g in grads {
        match g {
            LayerGrad::Linear { w, .. } => out.push(w.clone()),
            LayerGrad::Factored { right, .. } => out.push(right.clone()),
            LayerGrad::Skip(inner) => input_side_grads(inner, out),
            LayerGrad::None => {}
        }
    }
}

/// Residual of each linear layer's weight gradient outside the exact span
/// of that layer's inputs on the batch.
pub fn gradient_span_check(net: &NetworkDef, x: &Matrix, labels: &[usize]) -> Result<Vec<Option<f64>>> {
    let (_, grads) = loss_and_grad(net, x, labels)?;
    let mut gs = Vec::new();
    input_side_grads(&grads.layers, &mut gs);
    linear_io(net, x)?
        .iter()
        .zip(&gs)
        .map(|(io, g)| {
            if io.input.is_zero() {
                return Ok(None);
            }
            gradient_residual(g, &span_projector(&io.input)?.complement())
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumPair {
    pub pre: Vec<f64>,
    pub post: Vec<f64>,
    pub k_pre: usize,
    pub k_post: usize,
}

fn ladder(x: &Matrix) -> Result<(Vec<f64>, usize)> {
    let s = Spectrum::of_gram(&x.gram())?;
    if s.total() == 0.0 {
        return Err(Error::Degenerate("activations are all zero".into()));
    }
    Ok((s.energies().to_vec(), s.dim_for_energy(TRACE_ENERGY)))
}

/// Gram eigenvalue ladders of activations before and after a nonlinearity.
pub fn relu_spectrum(pre: &Matrix, post: &Matrix) -> Result<SpectrumPair> {
    if pre.rows() != post.rows() {
        return Err(Error::Dimension(format!("{} rows before, {} after", pre.rows(), post.rows())));
    }
    let (pre, k_pre) = ladder(pre)?;
    let (post, k_post) = ladder(post)?;
    Ok(SpectrumPair { pre, post, k_pre, k_post })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkipRanks {
    pub x: usize,
    pub f: usize,
    pub sum: usize,
    /// `dim(span(x) + span(f))`.
    pub union: usize,
}

fn exact_rank(gram: &Matrix) -> Result<usize> {
    Ok(Spectrum::of_gram(gram)?.rank())
}

pub fn skip_rank_check(x: &Matrix, f: &Matrix) -> Result<SkipRanks> {
    if x.shape() != f.shape() {
        return Err(Error::Dimension(format!("shortcut {:?} and branch {:?} differ", x.shape(), f.shape())));
    }
    let (gx, gf) = (x.gram(), f.gram());
    Ok(SkipRanks {
        x: exact_rank(&gx)?,
        f: exact_rank(&gf)?,
        sum: exact_rank(&x.add(f)?.gram())?,
        union: exact_rank(&gx.add(&gf)?)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkipSpectrum {
    pub ranks: SkipRanks,
    /// `TRACE_ENERGY` dimensions of the shortcut, branch and block output.
    pub k_input: usize,
    pub k_branch: usize,
    pub k_output: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpectra {
    pub relu: Vec<SpectrumPair>,
    pub skip: Vec<SkipSpectrum>,
}

/// ReLU and skip-block spectra of every nonlinearity and shortcut in `net`
/// on inputs `x`, in forward order.
pub fn network_spectra(net: &NetworkDef, x: &Matrix) -> Result<NetworkSpectra> {
    fn walk(layers: &[LayerDef], x: Matrix, out: &mut NetworkSpectra) -> Result<Matrix> {
        let mut h = x;
        for layer in layers {
            h = match layer {
                LayerDef::Relu => {
                    let post = h.map(|v| v.max(0.0));
                    out.relu.push(relu_spectrum(&h, &post)?);
                    post
                }
                LayerDef::Skip { inner } => {
                    let f = walk(inner, h.clone(), out)?;
                    let y = h.add(&f)?;
                    out.skip.push(SkipSpectrum {
                        ranks: skip_rank_check(&h, &f)?,
                        k_input: ladder(&h)?.1,
                        k_branch: ladder(&f)?.1,
                        k_output: ladder(&y)?.1,
                    });
                    y
                }
                l => {
                    let w = l.weight().expect("linear layer");
                    let mut y = h.matmul_t(&w)?;
                    let b = l.bias().expect("linear layer");
                    for i in 0..y.rows() {
                        y.row_mut(i).iter_mut().zip(b).for_each(|(v, bi)| *v += bi);
                    }
                    y
                }
            };
        }
        Ok(h)
    }
    net.validate()?;
    let mut out = NetworkSpectra::default();
    walk(&net.layers, x.clone(), &mut out)?;
    Ok(out)
}

/// `‖mixed P_{S⊥}‖_F / ‖mixed‖_F` with `S` the exact row span of `x`.
pub fn mixup_span_check(x: &Matrix, mixed: &Matrix) -> Result<f64> {
    let norm = mixed.frobenius();
    if norm == 0.0 {
        return Ok(0.0);
    }
    Ok(mixed.matmul(&span_projector(x)?.complement().p)?.frobenius() / norm)
}

/// Largest span residual over `batches` mixup batches of `batch_size` rows
/// drawn from `x`.
pub fn mixup_sweep(x: &Matrix, batches: usize, batch_size: usize, alpha: f64, seed: u64) -> Result<f64> {
    if batch_size == 0 || batch_size > x.rows() {
        return Err(Error::Range(format!("batch size {batch_size} not in [1, {}]", x.rows())));
    }
    let perp = span_projector(x)?.complement();
    let mut r = rng::seeded(seed);
    let targets = one_hot(&vec![0; batch_size], 1)?;
    let mut worst: f64 = 0.0;
    for _ in 0..batches {
        let rows = index::sample(&mut r, x.rows(), batch_size).into_vec();
        let (mixed, _) = mixup_batch(&x.select_rows(&rows), &targets, alpha, &mut r)?;
        let norm = mixed.frobenius();
        if norm > 0.0 {
            worst = worst.max(mixed.matmul(&perp.p)?.frobenius() / norm);
        }
    }
    Ok(worst)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowRankInit {
    pub k: usize,
    pub standard_accuracy: f64,
    pub projected_accuracy: f64,
    /// Largest logit difference between the two initializations before training.
    pub step0_max_logit_diff: f64,
    /// Exact rank of the projected run's first-layer weight after training.
    pub projected_final_rank: usize,
}

/// Trains `net` as given and with its first-layer rows projected onto the
/// planted `basis`, reporting validation accuracy of both.
pub fn lowrank_init_check(
    net: &NetworkDef,
    basis: &Matrix,
    train: &Dataset,
    val: &Dataset,
    config: &TrainConfig,
) -> Result<LowRankInit> {
    let p = Projector::from_rows(basis);
    let mut projected = net.clone();
    let w = net.linear_layers().first().and_then(|l| l.weight()).ok_or_else(|| Error::Structure {
        layer: 0,
        message: "network has no linear layer".into(),
    })?;
    projected.set_linear_weight(0, w.matmul(&p.p)?)?;
    let diff = logits(net, &train.x)?.sub(&logits(&projected, &train.x)?)?;
    let step0_max_logit_diff = diff.data().iter().fold(0.0_f64, |a, v| a.max(v.abs()));

    let (standard, _) = crate::nn::train(net.clone(), train, config)?;
    let (projected, _) = crate::nn::train(projected, train, config)?;
    let w = projected.linear_layers()[0].weight().expect("linear layer");
    Ok(LowRankInit {
        k: basis.rows(),
        standard_accuracy: evaluate(&standard, val)?,
        projected_accuracy: evaluate(&projected, val)?,
        step0_max_logit_diff,
        projected_final_rank: exact_rank(&w.matmul_t(&w)?)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_with_basis, split};

    fn planted(seed: u64, noise: f64) -> (Dataset, Matrix) {
        let spec = SyntheticSpec {
            ambient_dim: 12,
            intrinsic_rank: 3,
            classes: 3,
            samples_per_class: 40,
            noise_sigma: noise,
            seed,
        };
        generate_with_basis(&spec).unwrap()
    }

    #[test]
    fn relu_expands_constructed_witness() {
        let pre = Matrix::from_rows(&[vec![1.0, -1.0], vec![-1.0, 1.0], vec![2.0, -2.0]]).unwrap();
        let post = pre.map(|v| v.max(0.0));
        assert_eq!(post, Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![2.0, 0.0]]).unwrap());
        let pair = relu_spectrum(&pre, &post).unwrap();
        assert_eq!((pair.k_pre, pair.k_post), (1, 2));
        assert_eq!(skip_rank_check(&pre, &Matrix::zeros(3, 2)).unwrap().union, 1);
        assert_eq!(exact_rank(&post.gram()).unwrap(), 2);
    }

    #[test]
    fn relu_identity_on_nonnegative() {
        let x = rng::gaussian_matrix(10, 4, 1.0, &mut rng::seeded(1)).map(f64::abs);
        let pair = relu_spectrum(&x, &x.map(|v| v.max(0.0))).unwrap();
        assert_eq!(pair.pre, pair.post);
        assert!(pair.pre.windows(2).all(|w| w[0] >= w[1]) && pair.pre.iter().all(|&v| v >= 0.0));
        assert!(matches!(relu_spectrum(&Matrix::zeros(3, 2), &Matrix::zeros(3, 2)), Err(Error::Degenerate(_))));
    }

    #[test]
    fn skip_ranks_orthogonal_construction() {
        let x = Matrix::from_fn(5, 3, |i, j| if j == 0 { i as f64 + 1.0 } else { 0.0 });
        let f = Matrix::from_fn(5, 3, |i, j| if j == 1 { (i as f64).powi(2) - 2.0 } else { 0.0 });
        let r = skip_rank_check(&x, &f).unwrap();
        assert_eq!((r.x, r.f, r.union), (1, 1, 2));
        assert!(matches!(skip_rank_check(&x, &Matrix::zeros(4, 3)), Err(Error::Dimension(_))));
    }

    #[test]
    fn gradient_confined_to_input_span() {
        let (data, _) = planted(2, 0.0);
        let nets = [NetworkDef::mlp(12, &[10, 8], 3, 1), NetworkDef::residual_mlp(12, 8, 2, 3, 4)];
        for net in &nets {
            for batch in [&[0usize][..], &[0, 5, 50, 99], &(0..120).collect::<Vec<_>>()] {
                let sub = data.subset(batch);
                for r in gradient_span_check(net, &sub.x, &sub.labels).unwrap().into_iter().flatten() {
                    assert!(r < 1e-9, "{r}");
                }
            }
        }
    }

    #[test]
    fn mismatched_span_reports_residual() {
        let (data, _) = planted(3, 0.0);
        let net = NetworkDef::mlp(12, &[8], 3, 2);
        let (_, g) = loss_and_grad(&net, &data.x, &data.labels).unwrap();
        let gw = g.linear_weight_grads()[0].unwrap().clone();
        // A strict subspace of the input span: only its top direction.
        let top = crate::subspace::basis_for_dim(&data.x.gram(), 1).unwrap();
        let r = gradient_residual(&gw, &projector(&top).complement()).unwrap().unwrap();
        assert!(r > 1e-3, "{r}");
    }

    #[test]
    fn mixup_stays_in_span() {
        let (data, _) = planted(4, 0.0);
        assert!(mixup_span_check(&data.x, &data.x).unwrap() < 1e-12);
        assert!(mixup_sweep(&data.x, 200, 16, 0.4, 7).unwrap() < 1e-10);
    }

    #[test]
    fn decay_closed_form_holds() {
        let (data, _) = planted(5, 0.0);
        let w0 = rng::gaussian_matrix(3, 12, 0.5, &mut rng::seeded(8));
        let res = decay_closed_form(&w0, &data.x, &data.labels, 0.05, 0.01, 100).unwrap();
        assert!(res.max_abs_error < 1e-10, "{}", res.max_abs_error);
        assert_eq!(res.ratios.len(), 101);
    }

    #[test]
    fn init_split_matches_dimension_ratio() {
        let seeds: Vec<u64> = (0..20).collect();
        let s = init_split(32, 48, 8, &seeds).unwrap();
        assert!((s.mean - 40.0 / 48.0).abs() < 0.03, "{}", s.mean);
    }

    #[test]
    fn no_decay_leaves_first_layer_complement() {
        let (data, _) = planted(6, 0.0);
        let net = NetworkDef::mlp(12, &[10], 3, 3);
        let cfg = TrainConfig { epochs: 5, batch_size: 16, seed: 1, ..Default::default() };
        let exp = run_weight_decay_experiment(&net, &cfg, 5e-3, &data).unwrap();
        let off = &exp.without;
        assert!(off.perp_init.iter().zip(&off.perp_final).all(|(a, b)| (a - b).abs() < 1e-6));
        assert!(exp.with.final_perp_std < off.final_perp_std);
        for r in &off.trace.records {
            assert!((r.in_fraction + r.perp_fraction - 1.0).abs() < 1e-9);
        }
        assert_eq!(off.trace.records.len(), 6 * 2);
        let mut buf = Vec::new();
        exp.write_histogram_csv(&mut buf, 10).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 11);
        let mut buf = Vec::new();
        exp.write_trace_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 1 + 2 * 12);
    }

    #[test]
    fn lowrank_init_is_exact_at_step_zero() {
        let (data, basis) = planted(7, 0.0);
        let (tr, va) = split(&data, 0.7, 1).unwrap();
        let net = NetworkDef::mlp(12, &[10], 3, 5);
        let cfg = TrainConfig { epochs: 20, batch_size: 16, seed: 2, ..Default::default() };
        let res = lowrank_init_check(&net, &basis, &tr, &va, &cfg).unwrap();
        assert!(res.step0_max_logit_diff < 1e-12);
        assert_eq!(res.projected_final_rank, 3);
        assert!((res.standard_accuracy - res.projected_accuracy).abs() <= 0.01 + 1e-12);
    }

    #[test]
    fn network_spectra_shapes() {
        let (data, _) = planted(8, 0.0);
        let s = network_spectra(&NetworkDef::residual_mlp(12, 8, 2, 3, 1), &data.x).unwrap();
        assert_eq!(s.skip.len(), 2);
        for k in &s.skip {
            assert!(k.ranks.union >= k.ranks.x.max(k.ranks.f));
        }
        assert!(!s.relu.is_empty());
    }
}
