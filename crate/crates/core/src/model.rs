//! Feed-forward MLP classifiers.
//!
//! Layer `l` holds a weight matrix of shape `[n_in, n_out]` and a bias of
//! length `n_out`; a batch `X` of shape `[N, n_in]` maps to `X W + b`. Hidden
//! layers apply the activation, the final layer emits raw logits.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

pub const MODEL_FORMAT: &str = "heatsmooth-mlp";
pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    /// Smooth activation; needed where a twice-differentiable model is required.
    Tanh,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Tanh => v.tanh(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Mode {
    #[default]
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weights: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpModel {
    layer_dims: Vec<usize>,
    layers: Vec<Layer>,
    activation: Activation,
    mode: Mode,
    sigma: Option<f64>,
}

/// Parameter handles of one model registered on a tape, `(weights, bias)` per layer.
pub struct ParamVars(Vec<(Var, Var)>);

fn check_dims(layer_dims: &[usize]) -> Result<()> {
    if layer_dims.len() < 2 || layer_dims.contains(&0) {
        return Err(Error::config(
            "layer_dims",
            format!("need at least two positive dims, got {layer_dims:?}"),
        ));
    }
    Ok(())
}

impl MlpModel {
    /// Glorot-uniform weights; biases uniform in `±1/√n_in`.
    pub fn new_random(layer_dims: &[usize], activation: Activation, seed: u64) -> Result<Self> {
        check_dims(layer_dims)?;
        let mut rng = rng::stream(seed, &[0x1417]);
        let layers = layer_dims
            .windows(2)
            .map(|w| {
                let (n_in, n_out) = (w[0], w[1]);
                let limit = (6.0 / (n_in + n_out) as f64).sqrt();
                let weights = (0..n_in * n_out)
                    .map(|_| rng.random_range(-limit..=limit))
                    .collect();
                let b_limit = 1.0 / (n_in as f64).sqrt();
                let bias = (0..n_out)
                    .map(|_| rng.random_range(-b_limit..=b_limit))
                    .collect();
                Layer {
                    weights: Tensor::from_raw(vec![n_in, n_out], weights),
                    bias: Tensor::from_raw(vec![n_out], bias),
                }
            })
            .collect();
        Ok(MlpModel {
            layer_dims: layer_dims.to_vec(),
            layers,
            activation,
            mode: Mode::Train,
            sigma: None,
        })
    }

    pub fn zeros(layer_dims: &[usize], activation: Activation) -> Result<Self> {
        check_dims(layer_dims)?;
        let layers = layer_dims
            .windows(2)
            .map(|w| Layer {
                weights: Tensor::zeros(&[w[0], w[1]]),
                bias: Tensor::zeros(&[w[1]]),
            })
            .collect();
        Ok(MlpModel {
            layer_dims: layer_dims.to_vec(),
            layers,
            activation,
            mode: Mode::Train,
            sigma: None,
        })
    }

    pub fn from_layers(layers: Vec<Layer>, activation: Activation) -> Result<Self> {
        let first = layers.first().ok_or(Error::Empty("model layers"))?;
        let mut layer_dims = vec![first.weights.rows()];
        for l in &layers {
            let (n_in, n_out) = match l.weights.shape() {
                [a, b] => (*a, *b),
                s => {
                    return Err(Error::Shape {
                        expected: vec![0, 0],
                        actual: s.to_vec(),
                        context: "layer weights must be a matrix",
                    })
                }
            };
            if n_in != *layer_dims.last().unwrap() || l.bias.shape() != [n_out] {
                return Err(Error::Shape {
                    expected: vec![*layer_dims.last().unwrap(), n_out],
                    actual: l.weights.shape().to_vec(),
                    context: "consecutive layer dims",
                });
            }
            layer_dims.push(n_out);
        }
        Ok(MlpModel {
            layer_dims,
            layers,
            activation,
            mode: Mode::Train,
            sigma: None,
        })
    }

    /// A single affine layer `f(x) = A x + b` with `a` given as `[Nc, d_in]`.
    pub fn linear(a: &Tensor, b: &[f64]) -> Result<Self> {
        let (nc, d) = match a.shape() {
            [r, c] => (*r, *c),
            s => {
                return Err(Error::Shape {
                    expected: vec![0, 0],
                    actual: s.to_vec(),
                    context: "linear map",
                })
            }
        };
        let mut wt = vec![0.0; d * nc];
        for i in 0..nc {
            for j in 0..d {
                wt[j * nc + i] = a.get(i, j);
            }
        }
        MlpModel::from_layers(
            vec![Layer {
                weights: Tensor::matrix(d, nc, wt)?,
                bias: Tensor::vector(b.to_vec())?,
            }],
            Activation::Relu,
        )
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn d_in(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn n_classes(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    /// Frozen copy for use as a teacher.
    pub fn frozen(&self) -> Self {
        let mut m = self.clone();
        m.mode = Mode::Eval;
        m
    }

    /// Smoothing scale this model was trained for, if any.
    pub fn sigma(&self) -> Option<f64> {
        self.sigma
    }

    pub fn set_sigma(&mut self, sigma: Option<f64>) {
        self.sigma = sigma;
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    fn check_input(&self, len: usize) -> Result<()> {
        if len != self.d_in() {
            return Err(Error::Shape {
                expected: vec![self.d_in()],
                actual: vec![len],
                context: "model input",
            });
        }
        Ok(())
    }

    /// Logits for one example.
    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x.len())?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("model input"));
        }
        Ok(self.logits_unchecked(x))
    }

    pub(crate) fn logits_unchecked(&self, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        let last = self.layers.len() - 1;
        for (li, layer) in self.layers.iter().enumerate() {
            let n_out = layer.bias.len();
            let mut out = layer.bias.data().to_vec();
            let w = layer.weights.data();
            for (k, &hv) in h.iter().enumerate() {
                if hv == 0.0 {
                    continue;
                }
                for (o, &wv) in out.iter_mut().zip(&w[k * n_out..(k + 1) * n_out]) {
                    *o += hv * wv;
                }
            }
            if li != last {
                out.iter_mut().for_each(|v| *v = self.activation.apply(*v));
            }
            h = out;
        }
        h
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let out = self.logits(x.data())?;
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("model forward"));
        }
        Ok(Tensor::from_raw(vec![out.len()], out))
    }

    /// Logits for a batch `[N, d_in]`, giving `[N, Nc]`.
    pub fn forward_batch(&self, xs: &Tensor) -> Result<Tensor> {
        if xs.shape().len() != 2 {
            return Err(Error::Shape {
                expected: vec![0, self.d_in()],
                actual: xs.shape().to_vec(),
                context: "batch input",
            });
        }
        self.check_input(xs.cols())?;
        let n = xs.rows();
        let mut h = xs.data().to_vec();
        let mut width = xs.cols();
        let last = self.layers.len() - 1;
        for (li, layer) in self.layers.iter().enumerate() {
            let n_out = layer.bias.len();
            let mut out = crate::autodiff::matmul_raw(&h, layer.weights.data(), n, width, n_out);
            for row in out.chunks_mut(n_out) {
                for (o, &b) in row.iter_mut().zip(layer.bias.data()) {
                    *o += b;
                    if li != last {
                        *o = self.activation.apply(*o);
                    }
                }
            }
            h = out;
            width = n_out;
        }
        if h.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("model forward"));
        }
        Ok(Tensor::from_raw(vec![n, width], h))
    }

    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        Ok(argmax(&self.logits(x)?))
    }

    pub fn probabilities(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(softmax(&self.logits(x)?))
    }

    /// Registers the parameters on `tape` as differentiable leaves.
    pub fn register(&self, tape: &mut Tape) -> ParamVars {
        ParamVars(
            self.layers
                .iter()
                .map(|l| (tape.var(l.weights.clone()), tape.var(l.bias.clone())))
                .collect(),
        )
    }

    /// Registers the parameters as constants (no weight gradients).
    pub fn register_frozen(&self, tape: &mut Tape) -> ParamVars {
        ParamVars(
            self.layers
                .iter()
                .map(|l| (tape.constant(l.weights.clone()), tape.constant(l.bias.clone())))
                .collect(),
        )
    }

    /// Records the forward pass of a batch `x` (`[N, d_in]`) on `tape`.
    pub fn forward_on(&self, tape: &mut Tape, params: &ParamVars, x: Var) -> Result<Var> {
        let mut h = x;
        let last = params.0.len() - 1;
        for (li, &(w, b)) in params.0.iter().enumerate() {
            let z = tape.matmul(h, w)?;
            let z = tape.add_row(z, b)?;
            h = if li == last {
                z
            } else {
                match self.activation {
                    Activation::Relu => tape.relu(z)?,
                    Activation::Tanh => tape.tanh(z)?,
                }
            };
        }
        Ok(h)
    }

    /// Gradient with respect to the input of `w . f(x)`, by one reverse pass.
    pub fn input_grad_projected(&self, x: &Tensor, w: &Tensor) -> Result<Tensor> {
        let xs = x.clone().reshape(vec![1, x.len()])?;
        let ws = w.clone().reshape(vec![1, w.len()])?;
        let g = self.input_grad_projected_batch(&xs, &ws)?;
        g.reshape(vec![x.len()])
    }

    /// Row `i` of the result is the input gradient of `ws[i] . f(xs[i])`.
    pub fn input_grad_projected_batch(&self, xs: &Tensor, ws: &Tensor) -> Result<Tensor> {
        self.check_input(xs.cols())?;
        if ws.shape() != [xs.rows(), self.n_classes()] {
            return Err(Error::Shape {
                expected: vec![xs.rows(), self.n_classes()],
                actual: ws.shape().to_vec(),
                context: "projection weights",
            });
        }
        let mut tape = Tape::new();
        let params = self.register_frozen(&mut tape);
        let xv = tape.var(xs.clone());
        let out = self.forward_on(&mut tape, &params, xv)?;
        let wv = tape.constant(ws.clone());
        let proj = tape.row_dot(out, wv)?;
        let total = tape.sum(proj)?;
        let grads = tape.backward(total)?;
        Ok(grads.wrt(xv))
    }

    /// Full input Jacobian `[Nc, d_in]`, stacked from one projected gradient per class.
    pub fn jacobian(&self, x: &[f64]) -> Result<Tensor> {
        self.check_input(x.len())?;
        let nc = self.n_classes();
        let d = self.d_in();
        let xs = Tensor::matrix(nc, d, x.iter().copied().cycle().take(nc * d).collect())?;
        let mut eye = vec![0.0; nc * nc];
        for k in 0..nc {
            eye[k * nc + k] = 1.0;
        }
        let ws = Tensor::matrix(nc, nc, eye)?;
        self.input_grad_projected_batch(&xs, &ws)
    }

    /// Plain gradient-descent update using the weight gradients of `params`.
    pub fn sgd_step(&mut self, grads: &Gradients, params: &ParamVars, lr: f64) {
        for (layer, &(w, b)) in self.layers.iter_mut().zip(&params.0) {
            if let Some(g) = grads.get(w) {
                for (p, gv) in layer.weights.data_mut().iter_mut().zip(g.data()) {
                    *p -= lr * gv;
                }
            }
            if let Some(g) = grads.get(b) {
                for (p, gv) in layer.bias.data_mut().iter_mut().zip(g.data()) {
                    *p -= lr * gv;
                }
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.is_finite() && l.bias.is_finite())
    }

    pub fn to_json(&self) -> String {
        let doc = ModelDoc {
            format: MODEL_FORMAT.to_string(),
            version: MODEL_FORMAT_VERSION,
            layer_dims: self.layer_dims.clone(),
            activation: self.activation,
            sigma: self.sigma,
            layers: self
                .layers
                .iter()
                .map(|l| LayerDoc {
                    weights: l.weights.data().to_vec(),
                    bias: l.bias.data().to_vec(),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&doc).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let header: VersionProbe =
            serde_json::from_str(text).map_err(|e| Error::CorruptPayload(e.to_string()))?;
        if header.format != MODEL_FORMAT {
            return Err(Error::CorruptPayload(format!(
                "unexpected format tag {:?}",
                header.format
            )));
        }
        if header.version != MODEL_FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                found: header.version,
                expected: MODEL_FORMAT_VERSION,
            });
        }
        let doc: ModelDoc =
            serde_json::from_str(text).map_err(|e| Error::CorruptPayload(e.to_string()))?;
        check_dims(&doc.layer_dims).map_err(|e| Error::CorruptPayload(e.to_string()))?;
        if doc.layers.len() + 1 != doc.layer_dims.len() {
            return Err(Error::CorruptPayload("layer count does not match layer_dims".into()));
        }
        let layers = doc
            .layers
            .into_iter()
            .zip(doc.layer_dims.windows(2))
            .map(|(l, dims)| {
                Ok(Layer {
                    weights: Tensor::matrix(dims[0], dims[1], l.weights)?,
                    bias: Tensor::vector(l.bias)?,
                })
            })
            .collect::<Result<Vec<_>>>()
            .map_err(|e| Error::CorruptPayload(e.to_string()))?;
        let mut model = MlpModel::from_layers(layers, doc.activation)
            .map_err(|e| Error::CorruptPayload(e.to_string()))?;
        model.sigma = doc.sigma;
        model.mode = Mode::Eval;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        MlpModel::from_json(&text)
    }
}

#[derive(Deserialize)]
struct VersionProbe {
    format: String,
    version: u32,
}

#[derive(Serialize, Deserialize)]
struct ModelDoc {
    format: String,
    version: u32,
    layer_dims: Vec<usize>,
    activation: Activation,
    sigma: Option<f64>,
    layers: Vec<LayerDoc>,
}

#[derive(Serialize, Deserialize)]
struct LayerDoc {
    weights: Vec<f64>,
    bias: Vec<f64>,
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Class indices sorted by decreasing score (stable, so ties keep index order).
pub fn ranking(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    idx
}
