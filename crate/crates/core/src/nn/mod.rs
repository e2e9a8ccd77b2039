//! A small deterministic feed-forward engine: linear layers with bias, ReLU,
//! identity skip blocks and factored (rank-`r`) linear pairs, trained with
//! softmax cross-entropy and plain SGD with coupled weight decay.

mod backprop;
mod network;
mod train;

pub use backprop::{loss_and_grad, loss_and_grad_soft, one_hot, Gradients, LayerGrad};
pub use network::{forward, linear_io, logits, predict, LayerDef, LayerIo, NetworkDef};
pub use train::{
    evaluate, finetune_decomposed, mix_rows, mixup_batch, sgd_step, train, EpochStats, TrainConfig, Trainer,
};
