use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::{self, Rng};

/// One step of a feed-forward network.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerDef {
    /// `y = x Wᵀ + b` with `W` stored `m x d`.
    Linear { w: Matrix, b: Vec<f64> },
    /// `y = (x Rᵀ) Lᵀ + b`: a rank-`r` pair with `L` (`m x r`) and `R` (`r x d`),
    /// no nonlinearity or bias between the two stages.
    Factored { left: Matrix, right: Matrix, b: Vec<f64> },
    Relu,
    /// `y = x + f(x)` where `f` is the inner chain.
    Skip { inner: Vec<LayerDef> },
}

impl LayerDef {
    pub fn linear(w: Matrix, b: Vec<f64>) -> Self {
        LayerDef::Linear { w, b }
    }

    /// He-style Gaussian weights (std `√(2/d)`) and zero bias.
    pub fn init_linear(out_dim: usize, in_dim: usize, rng: &mut Rng) -> Self {
        let std = (2.0 / in_dim as f64).sqrt();
        LayerDef::Linear { w: rng::gaussian_matrix(out_dim, in_dim, std, rng), b: vec![0.0; out_dim] }
    }

    pub fn is_linear(&self) -> bool {
        matches!(self, LayerDef::Linear { .. } | LayerDef::Factored { .. })
    }

    /// The `m x d` map applied by a linear or factored layer.
    pub fn weight(&self) -> Option<Matrix> {
        match self {
            LayerDef::Linear { w, .. } => Some(w.clone()),
            LayerDef::Factored { left, right, .. } => Some(left.matmul(right).expect("factor shapes checked")),
            _ => None,
        }
    }

    pub fn bias(&self) -> Option<&[f64]> {
        match self {
            LayerDef::Linear { b, .. } | LayerDef::Factored { b, .. } => Some(b),
            _ => None,
        }
    }

    /// `(m, d)` of a linear or factored layer.
    pub fn linear_shape(&self) -> Option<(usize, usize)> {
        match self {
            LayerDef::Linear { w, .. } => Some(w.shape()),
            LayerDef::Factored { left, right, .. } => Some((left.rows(), right.cols())),
            _ => None,
        }
    }

    /// Parameter count including biases.
    pub fn parameter_count(&self) -> usize {
        match self {
            LayerDef::Linear { w, b } => w.rows() * w.cols() + b.len(),
            LayerDef::Factored { left, right, b } => {
                left.rows() * left.cols() + right.rows() * right.cols() + b.len()
            }
            LayerDef::Relu => 0,
            LayerDef::Skip { inner } => inner.iter().map(LayerDef::parameter_count).sum(),
        }
    }

    /// Checks this layer against an input width, returning the output width.
    fn output_dim(&self, in_dim: usize, index: usize) -> Result<usize> {
        let structure = |message: String| Error::Structure { layer: index, message };
        match self {
            LayerDef::Linear { w, b } => {
                if w.cols() != in_dim {
                    return Err(structure(format!("linear expects {} inputs, receives {in_dim}", w.cols())));
                }
                if b.len() != w.rows() {
                    return Err(structure(format!("bias length {} for {} outputs", b.len(), w.rows())));
                }
                Ok(w.rows())
            }
            LayerDef::Factored { left, right, b } => {
                if right.cols() != in_dim {
                    return Err(structure(format!("factored expects {} inputs, receives {in_dim}", right.cols())));
                }
                if left.cols() != right.rows() {
                    return Err(structure(format!(
                        "factor ranks disagree: left has {} columns, right has {} rows",
                        left.cols(),
                        right.rows()
                    )));
                }
                if b.len() != left.rows() {
                    return Err(structure(format!("bias length {} for {} outputs", b.len(), left.rows())));
                }
                Ok(left.rows())
            }
            LayerDef::Relu => Ok(in_dim),
            LayerDef::Skip { inner } => {
                let mut d = in_dim;
                for layer in inner {
                    d = layer.output_dim(d, index)?;
                }
                if d != in_dim {
                    return Err(structure(format!("skip block maps {in_dim} to {d}")));
                }
                Ok(d)
            }
        }
    }
}

/// An input width and an ordered list of layers.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkDef {
    pub input_dim: usize,
    pub layers: Vec<LayerDef>,
}

impl NetworkDef {
    /// Builds a network, validating dimension chaining.
    pub fn new(input_dim: usize, layers: Vec<LayerDef>) -> Result<Self> {
        let net = Self { input_dim, layers };
        net.validate()?;
        Ok(net)
    }

    /// Returns the output width after checking every layer chains onto the next.
    pub fn validate(&self) -> Result<usize> {
        let mut d = self.input_dim;
        for (i, layer) in self.layers.iter().enumerate() {
            d = layer.output_dim(d, i)?;
        }
        Ok(d)
    }

    pub fn output_dim(&self) -> usize {
        self.validate().expect("network was validated on construction")
    }

    /// `input -> hidden[0] -> ReLU -> ... -> classes`, He-initialized from `seed`.
    pub fn mlp(input_dim: usize, hidden: &[usize], classes: usize, seed: u64) -> Self {
        let mut rng = rng::seeded(seed);
        let mut layers = Vec::new();
        let mut d = input_dim;
        for &h in hidden {
            layers.push(LayerDef::init_linear(h, d, &mut rng));
            layers.push(LayerDef::Relu);
            d = h;
        }
        layers.push(LayerDef::init_linear(classes, d, &mut rng));
        Self { input_dim, layers }
    }

    /// `input -> width -> ReLU -> [skip: width -> ReLU -> width] x blocks -> ReLU -> classes`.
    pub fn residual_mlp(input_dim: usize, width: usize, blocks: usize, classes: usize, seed: u64) -> Self {
        let mut rng = rng::seeded(seed);
        let mut layers = vec![LayerDef::init_linear(width, input_dim, &mut rng), LayerDef::Relu];
        for _ in 0..blocks {
            let inner = vec![
                LayerDef::init_linear(width, width, &mut rng),
                LayerDef::Relu,
                LayerDef::init_linear(width, width, &mut rng),
            ];
            layers.push(LayerDef::Skip { inner });
            layers.push(LayerDef::Relu);
        }
        layers.push(LayerDef::init_linear(classes, width, &mut rng));
        Self { input_dim, layers }
    }

    /// Linear and factored layers in forward order, descending into skip blocks.
    pub fn linear_layers(&self) -> Vec<&LayerDef> {
        fn walk<'a>(layers: &'a [LayerDef], out: &mut Vec<&'a LayerDef>) {
            for l in layers {
                match l {
                    LayerDef::Skip { inner } => walk(inner, out),
                    l if l.is_linear() => out.push(l),
                    _ => {}
                }
            }
        }
        let mut out = Vec::new();
        walk(&self.layers, &mut out);
        out
    }

    pub fn linear_layers_mut(&mut self) -> Vec<&mut LayerDef> {
        fn walk<'a>(layers: &'a mut [LayerDef], out: &mut Vec<&'a mut LayerDef>) {
            for l in layers {
                if let LayerDef::Skip { inner } = l {
                    walk(inner, out);
                } else if l.is_linear() {
                    out.push(l);
                }
            }
        }
        let mut out = Vec::new();
        walk(&mut self.layers, &mut out);
        out
    }

    pub fn linear_count(&self) -> usize {
        self.linear_layers().len()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(LayerDef::parameter_count).sum()
    }

    pub fn has_factored(&self) -> bool {
        self.linear_layers().iter().any(|l| matches!(l, LayerDef::Factored { .. }))
    }

    /// Replaces the weight of linear layer `index`, keeping its bias.
    pub fn set_linear_weight(&mut self, index: usize, w: Matrix) -> Result<()> {
        let mut layers = self.linear_layers_mut();
        let count = layers.len();
        let layer = layers.get_mut(index).ok_or_else(|| Error::Structure {
            layer: index,
            message: format!("network has {count} linear layers"),
        })?;
        let (m, d) = layer.linear_shape().expect("linear layer");
        if w.shape() != (m, d) {
            return Err(Error::Structure {
                layer: index,
                message: format!("replacement weight is {:?}, expected {:?}", w.shape(), (m, d)),
            });
        }
        let b = layer.bias().expect("linear layer").to_vec();
        **layer = LayerDef::Linear { w, b };
        Ok(())
    }
}

fn check_input(net: &NetworkDef, x: &Matrix) -> Result<()> {
    if x.cols() != net.input_dim {
        return Err(Error::Dimension(format!(
            "input has {} columns, network expects {}",
            x.cols(),
            net.input_dim
        )));
    }
    Ok(())
}

pub(crate) fn add_bias(y: &mut Matrix, b: &[f64]) {
    for i in 0..y.rows() {
        y.row_mut(i).iter_mut().zip(b).for_each(|(v, bi)| *v += bi);
    }
}

pub(crate) fn relu(x: &Matrix) -> Matrix {
    x.map(|v| v.max(0.0))
}

/// Applies one linear or factored layer.
pub(crate) fn apply_linear(layer: &LayerDef, x: &Matrix) -> Result<Matrix> {
    match layer {
        LayerDef::Linear { w, b } => {
            let mut y = x.matmul_t(w)?;
            add_bias(&mut y, b);
            Ok(y)
        }
        LayerDef::Factored { left, right, b } => {
            let mut y = x.matmul_t(right)?.matmul_t(left)?;
            add_bias(&mut y, b);
            Ok(y)
        }
        _ => unreachable!("apply_linear on a non-linear layer"),
    }
}

/// Input and pre-activation output of one linear layer.
#[derive(Debug, Clone)]
pub struct LayerIo {
    pub input: Matrix,
    pub output: Matrix,
}

fn run(
    layers: &[LayerDef],
    x: Matrix,
    trace: &mut Vec<Matrix>,
    io: &mut Option<&mut Vec<LayerIo>>,
) -> Result<Matrix> {
    let mut h = x;
    for layer in layers {
        h = match layer {
            LayerDef::Linear { .. } | LayerDef::Factored { .. } => {
                let y = apply_linear(layer, &h)?;
                if let Some(io) = io.as_deref_mut() {
                    io.push(LayerIo { input: h, output: y.clone() });
                }
                y
            }
            LayerDef::Relu => relu(&h),
            LayerDef::Skip { inner } => {
                let f = run(inner, h.clone(), trace, io)?;
                h.add(&f)?
            }
        };
        trace.push(h.clone());
    }
    Ok(h)
}

/// Every intermediate activation: entry 0 is the input, then one entry per
/// executed step (linear outputs before the nonlinearity, ReLU outputs, the
/// steps inside a skip block followed by the block's sum). The last entry is
/// the logits.
pub fn forward(net: &NetworkDef, x: &Matrix) -> Result<Vec<Matrix>> {
    check_input(net, x)?;
    let mut trace = vec![x.clone()];
    run(&net.layers, x.clone(), &mut trace, &mut None)?;
    Ok(trace)
}

pub fn logits(net: &NetworkDef, x: &Matrix) -> Result<Matrix> {
    check_input(net, x)?;
    run_plain(&net.layers, x.clone())
}

fn run_plain(layers: &[LayerDef], x: Matrix) -> Result<Matrix> {
    let mut h = x;
    for layer in layers {
        h = match layer {
            LayerDef::Linear { .. } | LayerDef::Factored { .. } => apply_linear(layer, &h)?,
            LayerDef::Relu => relu(&h),
            LayerDef::Skip { inner } => {
                let f = run_plain(inner, h.clone())?;
                h.add(&f)?
            }
        };
    }
    Ok(h)
}

/// Input and output (bias included, before any nonlinearity) of every linear layer.
pub fn linear_io(net: &NetworkDef, x: &Matrix) -> Result<Vec<LayerIo>> {
    check_input(net, x)?;
    let mut io = Vec::new();
    let mut trace = Vec::new();
    run(&net.layers, x.clone(), &mut trace, &mut Some(&mut io))?;
    Ok(io)
}

/// Class with the largest logit per row; ties go to the lower index.
pub fn predict(net: &NetworkDef, x: &Matrix) -> Result<Vec<usize>> {
    Ok(logits(net, x)?.row_iter().map(argmax).collect())
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
