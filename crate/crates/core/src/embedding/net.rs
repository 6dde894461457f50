//! Fixed-vocabulary feed-forward network over a flat parameter vector.
//!
//! Activations are laid out channel-major: a tensor of shape `(ch, len)` is
//! stored as `ch` consecutive runs of `len` values.

use super::{ActivationKind, EmbeddingError, LayerSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Shape {
    pub ch: usize,
    pub len: usize,
}

impl Shape {
    pub fn size(self) -> usize {
        self.ch * self.len
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Layer {
    Conv {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        in_len: usize,
        out_len: usize,
        w: usize,
        b: usize,
    },
    Act(ActivationKind),
    Gap {
        ch: usize,
        len: usize,
    },
    Flatten,
    Dense {
        inp: usize,
        out: usize,
        w: usize,
        b: usize,
    },
}

impl Layer {
    /// (fan_in, fan_out, weight offset, weight count) for initialisation.
    pub fn weight_block(&self) -> Option<(usize, usize, usize, usize)> {
        match *self {
            Layer::Conv {
                in_ch,
                out_ch,
                kernel,
                w,
                ..
            } => Some((in_ch * kernel, out_ch * kernel, w, out_ch * in_ch * kernel)),
            Layer::Dense { inp, out, w, .. } => Some((inp, out, w, inp * out)),
            _ => None,
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Network {
    pub layers: Vec<Layer>,
    /// `shapes[l]` is the input shape of layer `l`; the last entry is the
    /// network output.
    pub shapes: Vec<Shape>,
    pub n_params: usize,
    /// Index into the activation list of the feature layer output (the
    /// input of the classifier head).
    pub feature_act: usize,
}

impl Network {
    /// Builds the body from `specs` and appends a dense classifier head.
    pub fn build(specs: &[LayerSpec], activation: ActivationKind, input_len: usize, classes: usize) -> Result<Self, EmbeddingError> {
        let mut shape = Shape { ch: 1, len: input_len };
        let mut shapes = vec![shape];
        let mut layers = Vec::with_capacity(specs.len() + 1);
        let mut n_params = 0;
        let arch = |s: String| EmbeddingError::Architecture(s);
        for spec in specs {
            let layer = match *spec {
                LayerSpec::Conv1d {
                    channels,
                    kernel,
                    stride,
                } => {
                    if channels == 0 || kernel == 0 || stride == 0 {
                        return Err(arch("conv parameters must be positive".into()));
                    }
                    if shape.len < kernel {
                        return Err(arch(format!("conv kernel {kernel} longer than input length {}", shape.len)));
                    }
                    let out_len = (shape.len - kernel) / stride + 1;
                    let w = n_params;
                    n_params += channels * shape.ch * kernel;
                    let b = n_params;
                    n_params += channels;
                    let l = Layer::Conv {
                        in_ch: shape.ch,
                        out_ch: channels,
                        kernel,
                        stride,
                        in_len: shape.len,
                        out_len,
                        w,
                        b,
                    };
                    shape = Shape {
                        ch: channels,
                        len: out_len,
                    };
                    l
                }
                LayerSpec::Activation => Layer::Act(activation),
                LayerSpec::GlobalAvgPool => {
                    let l = Layer::Gap {
                        ch: shape.ch,
                        len: shape.len,
                    };
                    shape = Shape { ch: shape.ch, len: 1 };
                    l
                }
                LayerSpec::Flatten => {
                    shape = Shape {
                        ch: shape.size(),
                        len: 1,
                    };
                    Layer::Flatten
                }
                LayerSpec::Dense { units } => {
                    if units == 0 {
                        return Err(arch("dense layer needs at least one unit".into()));
                    }
                    let inp = shape.size();
                    let w = n_params;
                    n_params += units * inp;
                    let b = n_params;
                    n_params += units;
                    shape = Shape { ch: units, len: 1 };
                    Layer::Dense { inp, out: units, w, b }
                }
            };
            layers.push(layer);
            shapes.push(shape);
        }
        let feature_act = layers.len();
        let inp = shape.size();
        let w = n_params;
        n_params += classes * inp;
        let b = n_params;
        n_params += classes;
        layers.push(Layer::Dense {
            inp,
            out: classes,
            w,
            b,
        });
        shapes.push(Shape { ch: classes, len: 1 });
        Ok(Network {
            layers,
            shapes,
            n_params,
            feature_act,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.shapes[self.feature_act].size()
    }

    /// Runs the network, returning every intermediate activation; entry 0 is
    /// the input, the last entry the logits. Stops after `upto` layers.
    pub fn forward(&self, params: &[f64], input: &[f64], upto: usize) -> Vec<Vec<f64>> {
        let mut acts = Vec::with_capacity(upto + 1);
        acts.push(input.to_vec());
        for layer in &self.layers[..upto] {
            let x = acts.last().expect("input present");
            let y = match *layer {
                Layer::Conv {
                    in_ch,
                    out_ch,
                    kernel,
                    stride,
                    in_len,
                    out_len,
                    w,
                    b,
                } => {
                    let mut y = vec![0.0; out_ch * out_len];
                    for o in 0..out_ch {
                        let yo = &mut y[o * out_len..(o + 1) * out_len];
                        yo.fill(params[b + o]);
                        for i in 0..in_ch {
                            let wk = &params[w + (o * in_ch + i) * kernel..w + (o * in_ch + i + 1) * kernel];
                            let xi = &x[i * in_len..(i + 1) * in_len];
                            for (t, yt) in yo.iter_mut().enumerate() {
                                let window = &xi[t * stride..t * stride + kernel];
                                *yt += wk.iter().zip(window).map(|(a, b)| a * b).sum::<f64>();
                            }
                        }
                    }
                    y
                }
                Layer::Act(kind) => x.iter().map(|&v| kind.apply(v)).collect(),
                Layer::Gap { ch, len } => (0..ch)
                    .map(|c| x[c * len..(c + 1) * len].iter().sum::<f64>() / len as f64)
                    .collect(),
                Layer::Flatten => x.clone(),
                Layer::Dense { inp, out, w, b } => (0..out)
                    .map(|o| {
                        params[b + o]
                            + params[w + o * inp..w + (o + 1) * inp]
                                .iter()
                                .zip(x.iter())
                                .map(|(a, b)| a * b)
                                .sum::<f64>()
                    })
                    .collect(),
            };
            acts.push(y);
        }
        acts
    }

    /// Back-propagates `grad_out` (gradient w.r.t. the logits), adding
    /// parameter gradients into `grad`.
    pub fn backward(&self, params: &[f64], acts: &[Vec<f64>], grad_out: Vec<f64>, grad: &mut [f64]) {
        let mut g = grad_out;
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let x = &acts[l];
            let need_input_grad = l > 0;
            g = match *layer {
                Layer::Conv {
                    in_ch,
                    out_ch,
                    kernel,
                    stride,
                    in_len,
                    out_len,
                    w,
                    b,
                } => {
                    let mut gx = if need_input_grad { vec![0.0; in_ch * in_len] } else { Vec::new() };
                    for o in 0..out_ch {
                        let go = &g[o * out_len..(o + 1) * out_len];
                        grad[b + o] += go.iter().sum::<f64>();
                        for i in 0..in_ch {
                            let base = w + (o * in_ch + i) * kernel;
                            let xi = &x[i * in_len..(i + 1) * in_len];
                            for (t, &gt) in go.iter().enumerate() {
                                if gt == 0.0 {
                                    continue;
                                }
                                let start = t * stride;
                                for k in 0..kernel {
                                    grad[base + k] += gt * xi[start + k];
                                }
                                if need_input_grad {
                                    let gxi = &mut gx[i * in_len + start..i * in_len + start + kernel];
                                    for (k, v) in gxi.iter_mut().enumerate() {
                                        *v += params[base + k] * gt;
                                    }
                                }
                            }
                        }
                    }
                    gx
                }
                Layer::Act(kind) => {
                    let y = &acts[l + 1];
                    g.iter()
                        .zip(x.iter().zip(y))
                        .map(|(&gv, (&xv, &yv))| gv * kind.derivative(xv, yv))
                        .collect()
                }
                Layer::Gap { ch, len } => {
                    let mut gx = vec![0.0; ch * len];
                    for c in 0..ch {
                        gx[c * len..(c + 1) * len].fill(g[c] / len as f64);
                    }
                    gx
                }
                Layer::Flatten => g,
                Layer::Dense { inp, out, w, b } => {
                    let mut gx = if need_input_grad { vec![0.0; inp] } else { Vec::new() };
                    for (o, &go) in g.iter().enumerate().take(out) {
                        grad[b + o] += go;
                        if go == 0.0 {
                            continue;
                        }
                        let row = w + o * inp;
                        for j in 0..inp {
                            grad[row + j] += go * x[j];
                        }
                        if need_input_grad {
                            for (j, v) in gx.iter_mut().enumerate() {
                                *v += params[row + j] * go;
                            }
                        }
                    }
                    gx
                }
            };
        }
    }
}

/// Softmax cross-entropy of one sample; returns the loss and writes
/// `softmax - onehot(label)` into `grad`.
pub(crate) fn softmax_xent(logits: &[f64], label: usize, grad: &mut Vec<f64>) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    grad.clear();
    grad.extend(exps.iter().map(|e| e / total));
    grad[label] -= 1.0;
    total.ln() + max - logits[label]
}
