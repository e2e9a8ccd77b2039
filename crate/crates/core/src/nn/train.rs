use rand::seq::SliceRandom;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::{self, Rng};

use super::backprop::{loss_and_grad_soft, one_hot, Gradients, LayerGrad};
use super::network::{argmax, logits, LayerDef, NetworkDef};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    #[serde(default)]
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    /// Beta(α, α) mixing; 0 disables mixup.
    #[serde(default)]
    pub mixup_alpha: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { learning_rate: 0.05, weight_decay: 0.0, epochs: 50, batch_size: 32, seed: 0, mixup_alpha: 0.0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Range(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Range(format!("weight decay {} must be >= 0", self.weight_decay)));
        }
        if self.batch_size == 0 {
            return Err(Error::Range("batch size must be at least 1".into()));
        }
        if !(self.mixup_alpha >= 0.0 && self.mixup_alpha.is_finite()) {
            return Err(Error::Range(format!("mixup alpha {} must be >= 0", self.mixup_alpha)));
        }
        Ok(())
    }
}

/// `W ← W − η (G + λ W)` on every weight matrix; `b ← b − η g_b` (no decay on biases).
pub fn sgd_step(net: &mut NetworkDef, grads: &Gradients, config: &TrainConfig) -> Result<()> {
    let (lr, wd) = (config.learning_rate, config.weight_decay);
    fn update_matrix(w: &mut Matrix, g: &Matrix, lr: f64, wd: f64) -> Result<()> {
        if w.shape() != g.shape() {
            return Err(Error::Dimension(format!("gradient {:?} for weight {:?}", g.shape(), w.shape())));
        }
        w.data_mut().iter_mut().zip(g.data()).for_each(|(w, g)| *w -= lr * (g + wd * *w));
        Ok(())
    }
    fn update_bias(b: &mut [f64], g: &[f64], lr: f64) -> Result<()> {
        if b.len() != g.len() {
            return Err(Error::Dimension(format!("bias gradient length {} for {}", g.len(), b.len())));
        }
        b.iter_mut().zip(g).for_each(|(b, g)| *b -= lr * g);
        Ok(())
    }
    fn walk(layers: &mut [LayerDef], grads: &[LayerGrad], lr: f64, wd: f64) -> Result<()> {
        if layers.len() != grads.len() {
            return Err(Error::Dimension("gradient structure does not match network".into()));
        }
        for (layer, grad) in layers.iter_mut().zip(grads) {
            match (layer, grad) {
                (LayerDef::Linear { w, b }, LayerGrad::Linear { w: gw, b: gb }) => {
                    update_matrix(w, gw, lr, wd)?;
                    update_bias(b, gb, lr)?;
                }
                (LayerDef::Factored { left, right, b }, LayerGrad::Factored { left: gl, right: gr, b: gb }) => {
                    update_matrix(left, gl, lr, wd)?;
                    update_matrix(right, gr, lr, wd)?;
                    update_bias(b, gb, lr)?;
                }
                (LayerDef::Skip { inner }, LayerGrad::Skip(g)) => walk(inner, g, lr, wd)?,
                (LayerDef::Relu, LayerGrad::None) => {}
                _ => return Err(Error::Dimension("gradient structure does not match network".into())),
            }
        }
        Ok(())
    }
    walk(&mut net.layers, &grads.layers, lr, wd)
}

/// Row `i` of the result is `γ·row_i + (1−γ)·row_{partner[i]}`, applied to
/// inputs and soft targets alike.
pub fn mix_rows(x: &Matrix, targets: &Matrix, gamma: f64, partner: &[usize]) -> Result<(Matrix, Matrix)> {
    if x.rows() != targets.rows() || partner.len() != x.rows() {
        return Err(Error::Dimension(format!(
            "mixup over {} inputs, {} targets, {} partners",
            x.rows(),
            targets.rows(),
            partner.len()
        )));
    }
    let mix = |m: &Matrix| {
        Matrix::from_fn(m.rows(), m.cols(), |i, j| gamma * m[(i, j)] + (1.0 - gamma) * m[(partner[i], j)])
    };
    Ok((mix(x), mix(targets)))
}

/// Mixup: draws `γ ~ Beta(α, α)`, then pairs each row with a row of a shuffled
/// copy of the batch.
pub fn mixup_batch(x: &Matrix, targets: &Matrix, alpha: f64, rng: &mut Rng) -> Result<(Matrix, Matrix)> {
    let beta = Beta::new(alpha, alpha).map_err(|e| Error::Range(format!("mixup alpha {alpha}: {e}")))?;
    let gamma = beta.sample(rng);
    let mut partner: Vec<usize> = (0..x.rows()).collect();
    partner.shuffle(rng);
    mix_rows(x, targets, gamma, &partner)
}

/// Fraction of samples whose argmax logit matches the label.
pub fn evaluate(net: &NetworkDef, data: &Dataset) -> Result<f64> {
    let z = logits(net, &data.x)?;
    let correct = z.row_iter().zip(&data.labels).filter(|(row, &c)| argmax(row) == c).count();
    Ok(correct as f64 / data.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean minibatch loss over the epoch.
    pub loss: f64,
    /// Training-set accuracy after the epoch.
    pub accuracy: f64,
}

/// Minibatch SGD driver that can be advanced one epoch at a time.
///
/// Per epoch the generator is consumed in this order: one shuffle of the
/// sample order, then for each batch (when mixup is on) a `γ` draw followed by
/// a partner shuffle.
pub struct Trainer {
    net: NetworkDef,
    config: TrainConfig,
    rng: Rng,
    epoch: usize,
}

impl Trainer {
    pub fn new(net: NetworkDef, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        net.validate()?;
        let rng = rng::seeded(config.seed);
        Ok(Self { net, config, rng, epoch: 0 })
    }

    pub fn network(&self) -> &NetworkDef {
        &self.net
    }

    pub fn into_network(self) -> NetworkDef {
        self.net
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn run_epoch(&mut self, data: &Dataset) -> Result<EpochStats> {
        if data.is_empty() {
            return Err(Error::Degenerate("training set is empty".into()));
        }
        self.epoch += 1;
        let classes = self.net.output_dim();
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.rng);
        let mut total_loss = 0.0;
        for chunk in order.chunks(self.config.batch_size) {
            let mut x = data.x.select_rows(chunk);
            let labels: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
            let mut targets = one_hot(&labels, classes)?;
            if self.config.mixup_alpha > 0.0 {
                (x, targets) = mixup_batch(&x, &targets, self.config.mixup_alpha, &mut self.rng)?;
            }
            let (loss, grads) = loss_and_grad_soft(&self.net, &x, &targets)?;
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch: self.epoch });
            }
            sgd_step(&mut self.net, &grads, &self.config)?;
            total_loss += loss * chunk.len() as f64;
        }
        if !self.net.linear_layers().iter().all(|l| l.weight().is_some_and(|w| w.all_finite())) {
            return Err(Error::Divergence { epoch: self.epoch });
        }
        Ok(EpochStats { epoch: self.epoch, loss: total_loss / data.len() as f64, accuracy: evaluate(&self.net, data)? })
    }
}

/// Trains for `config.epochs` epochs, returning the network and per-epoch history.
pub fn train(net: NetworkDef, data: &Dataset, config: &TrainConfig) -> Result<(NetworkDef, Vec<EpochStats>)> {
    if data.is_empty() {
        return Err(Error::Degenerate("training set is empty".into()));
    }
    let mut trainer = Trainer::new(net, config.clone())?;
    let history = (0..config.epochs).map(|_| trainer.run_epoch(data)).collect::<Result<Vec<_>>>()?;
    Ok((trainer.into_network(), history))
}

/// Trains a network whose searched layers are factored pairs. Gradients flow
/// into the factors directly, so no layer can exceed its factor rank.
pub fn finetune_decomposed(
    net: NetworkDef,
    data: &Dataset,
    config: &TrainConfig,
) -> Result<(NetworkDef, Vec<EpochStats>)> {
    if !net.has_factored() {
        return Err(Error::Structure { layer: 0, message: "network has no factored layers to finetune".into() });
    }
    train(net, data, config)
}
