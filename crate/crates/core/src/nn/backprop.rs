use crate::error::{Error, Result};
use crate::linalg::Matrix;

use super::network::{add_bias, relu, LayerDef, NetworkDef};

/// Gradient for one layer, mirroring [`LayerDef`].
#[derive(Debug, Clone, PartialEq)]
pub enum LayerGrad {
    Linear { w: Matrix, b: Vec<f64> },
    Factored { left: Matrix, right: Matrix, b: Vec<f64> },
    Skip(Vec<LayerGrad>),
    None,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrad>,
}

impl Gradients {
    /// Weight gradients of plain linear layers, in forward order
    /// (factored layers contribute `None`).
    pub fn linear_weight_grads(&self) -> Vec<Option<&Matrix>> {
        fn walk<'a>(grads: &'a [LayerGrad], out: &mut Vec<Option<&'a Matrix>>) {
            for g in grads {
                match g {
                    LayerGrad::Linear { w, .. } => out.push(Some(w)),
                    LayerGrad::Factored { .. } => out.push(None),
                    LayerGrad::Skip(inner) => walk(inner, out),
                    LayerGrad::None => {}
                }
            }
        }
        let mut out = Vec::new();
        walk(&self.layers, &mut out);
        out
    }

    /// All gradient entries flattened in the same order as the network's parameters.
    pub fn flatten(&self) -> Vec<f64> {
        fn walk(grads: &[LayerGrad], out: &mut Vec<f64>) {
            for g in grads {
                match g {
                    LayerGrad::Linear { w, b } => {
                        out.extend_from_slice(w.data());
                        out.extend_from_slice(b);
                    }
                    LayerGrad::Factored { left, right, b } => {
                        out.extend_from_slice(left.data());
                        out.extend_from_slice(right.data());
                        out.extend_from_slice(b);
                    }
                    LayerGrad::Skip(inner) => walk(inner, out),
                    LayerGrad::None => {}
                }
            }
        }
        let mut out = Vec::new();
        walk(&self.layers, &mut out);
        out
    }
}

enum Cache {
    Linear { x: Matrix },
    Factored { x: Matrix, h: Matrix },
    Relu { pre: Matrix },
    Skip { inner: Vec<Cache> },
}

fn forward_cached(layers: &[LayerDef], x: Matrix, caches: &mut Vec<Cache>) -> Result<Matrix> {
    let mut h = x;
    for layer in layers {
        h = match layer {
            LayerDef::Linear { w, b } => {
                let mut y = h.matmul_t(w)?;
                add_bias(&mut y, b);
                caches.push(Cache::Linear { x: h });
                y
            }
            LayerDef::Factored { left, right, b } => {
                let mid = h.matmul_t(right)?;
                let mut y = mid.matmul_t(left)?;
                add_bias(&mut y, b);
                caches.push(Cache::Factored { x: h, h: mid });
                y
            }
            LayerDef::Relu => {
                let y = relu(&h);
                caches.push(Cache::Relu { pre: h });
                y
            }
            LayerDef::Skip { inner } => {
                let mut inner_caches = Vec::new();
                let f = forward_cached(inner, h.clone(), &mut inner_caches)?;
                caches.push(Cache::Skip { inner: inner_caches });
                h.add(&f)?
            }
        };
    }
    Ok(h)
}

fn column_sums(m: &Matrix) -> Vec<f64> {
    let mut s = vec![0.0; m.cols()];
    for row in m.row_iter() {
        s.iter_mut().zip(row).for_each(|(a, v)| *a += v);
    }
    s
}

fn backward(layers: &[LayerDef], caches: Vec<Cache>, grad_out: Matrix) -> Result<(Matrix, Vec<LayerGrad>)> {
    let mut grads = Vec::with_capacity(layers.len());
    let mut g = grad_out;
    for (layer, cache) in layers.iter().zip(caches).rev() {
        let (g_in, lg) = match (layer, cache) {
            (LayerDef::Linear { w, .. }, Cache::Linear { x }) => {
                let gw = g.transpose().matmul(&x)?;
                let gb = column_sums(&g);
                (g.matmul(w)?, LayerGrad::Linear { w: gw, b: gb })
            }
            (LayerDef::Factored { left, right, .. }, Cache::Factored { x, h }) => {
                let g_left = g.transpose().matmul(&h)?;
                let gb = column_sums(&g);
                let g_mid = g.matmul(left)?;
                let g_right = g_mid.transpose().matmul(&x)?;
                (g_mid.matmul(right)?, LayerGrad::Factored { left: g_left, right: g_right, b: gb })
            }
            (LayerDef::Relu, Cache::Relu { pre }) => {
                let masked = Matrix::from_fn(g.rows(), g.cols(), |i, j| if pre[(i, j)] > 0.0 { g[(i, j)] } else { 0.0 });
                (masked, LayerGrad::None)
            }
            (LayerDef::Skip { inner }, Cache::Skip { inner: inner_caches }) => {
                let (g_branch, inner_grads) = backward(inner, inner_caches, g.clone())?;
                (g.add(&g_branch)?, LayerGrad::Skip(inner_grads))
            }
            _ => unreachable!("cache mirrors the layer list"),
        };
        grads.push(lg);
        g = g_in;
    }
    grads.reverse();
    Ok((g, grads))
}

/// Mean softmax cross-entropy against per-row target distributions, and its gradient.
pub fn loss_and_grad_soft(net: &NetworkDef, x: &Matrix, targets: &Matrix) -> Result<(f64, Gradients)> {
    if x.cols() != net.input_dim {
        return Err(Error::Dimension(format!(
            "input has {} columns, network expects {}",
            x.cols(),
            net.input_dim
        )));
    }
    let mut caches = Vec::with_capacity(net.layers.len());
    let logits = forward_cached(&net.layers, x.clone(), &mut caches)?;
    if targets.shape() != logits.shape() {
        return Err(Error::Dimension(format!(
            "targets are {:?}, logits are {:?}",
            targets.shape(),
            logits.shape()
        )));
    }
    let n = logits.rows() as f64;
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    for i in 0..logits.rows() {
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + sum_exp.ln();
        for (j, &z) in row.iter().enumerate() {
            let t = targets[(i, j)];
            if t != 0.0 {
                loss -= t * (z - log_z);
            }
            grad[(i, j)] = ((z - log_z).exp() - t) / n;
        }
    }
    let (_, layers) = backward(&net.layers, caches, grad)?;
    Ok((loss / n, Gradients { layers }))
}

pub fn one_hot(labels: &[usize], classes: usize) -> Result<Matrix> {
    let mut t = Matrix::zeros(labels.len(), classes);
    for (i, &c) in labels.iter().enumerate() {
        if c >= classes {
            return Err(Error::Range(format!("label {c} at row {i} is not below {classes} classes")));
        }
        t[(i, c)] = 1.0;
    }
    Ok(t)
}

/// Mean cross-entropy for hard labels and its gradient.
pub fn loss_and_grad(net: &NetworkDef, x: &Matrix, labels: &[usize]) -> Result<(f64, Gradients)> {
    if labels.len() != x.rows() {
        return Err(Error::Dimension(format!("{} labels for {} rows", labels.len(), x.rows())));
    }
    let targets = one_hot(labels, net.output_dim())?;
    loss_and_grad_soft(net, x, &targets)
}
