//! Dense networks with hand-written reverse passes.
//!
//! Every layer is `leaky_relu(bn?(x W + b))`. Weights are stored `in x out`
//! so a batch multiplies from the left. Reverse passes return gradients for
//! every learnable tensor and for the input, which lets losses downstream of
//! one network flow into the network that produced its input.

use ndarray::{Array1, Array2, ArrayView2, ArrayViewD, ArrayViewMutD, Axis, Zip};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

pub const DEFAULT_SLOPE: f64 = 0.01;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Layer shapes of a dense network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    /// Input width followed by each layer's output width.
    pub layer_dims: Vec<usize>,
    /// Negative slope of the leaky rectifier.
    pub slope: f64,
    /// One flag per layer: batch-normalize before the activation.
    pub batchnorm: Vec<bool>,
}

impl MlpSpec {
    pub fn new(layer_dims: Vec<usize>, slope: f64) -> Result<Self> {
        let layers = layer_dims.len().saturating_sub(1);
        let spec = Self {
            layer_dims,
            slope,
            batchnorm: vec![false; layers],
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Normalize every layer except the last.
    pub fn with_hidden_batchnorm(mut self) -> Self {
        let n = self.batchnorm.len();
        for (i, f) in self.batchnorm.iter_mut().enumerate() {
            *f = i + 1 < n;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_dims.len() < 2 {
            return Err(Error::invalid("network needs at least an input and an output width"));
        }
        if self.layer_dims.contains(&0) {
            return Err(Error::invalid("layer widths must be positive"));
        }
        if !(self.slope > 0.0 && self.slope < 1.0) {
            return Err(Error::invalid(format!("leaky slope {} outside (0, 1)", self.slope)));
        }
        if self.batchnorm.len() != self.layer_dims.len() - 1 {
            return Err(Error::invalid("need one batchnorm flag per layer"));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().expect("validated spec")
    }

    pub fn n_layers(&self) -> usize {
        self.layer_dims.len() - 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
}

impl BatchNorm {
    fn new(width: usize) -> Self {
        Self {
            gamma: Array1::ones(width),
            beta: Array1::zeros(width),
            running_mean: Array1::zeros(width),
            running_var: Array1::ones(width),
        }
    }
}

/// Affine map `x W + b` with optional batch normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub bn: Option<BatchNorm>,
}

impl Layer {
    pub fn zeros(fan_in: usize, fan_out: usize, batchnorm: bool) -> Self {
        Self {
            weight: Array2::zeros((fan_in, fan_out)),
            bias: Array1::zeros(fan_out),
            bn: batchnorm.then(|| BatchNorm::new(fan_out)),
        }
    }

    /// Glorot-uniform weights, zero bias.
    pub fn xavier(fan_in: usize, fan_out: usize, batchnorm: bool, rng: &mut seed::Rng) -> Self {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let weight = Array2::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-bound..=bound));
        Self {
            weight,
            bias: Array1::zeros(fan_out),
            bn: batchnorm.then(|| BatchNorm::new(fan_out)),
        }
    }

    pub fn affine(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        x.dot(&self.weight) + &self.bias
    }

    /// Reverse of [`Layer::affine`]: `(dW, db, dx)`.
    pub fn affine_backward(
        &self,
        x: ArrayView2<'_, f64>,
        grad: ArrayView2<'_, f64>,
    ) -> (Array2<f64>, Array1<f64>, Array2<f64>) {
        let dw = x.t().dot(&grad);
        let db = grad.sum_axis(Axis(0));
        let dx = grad.dot(&self.weight.t());
        (dw, db, dx)
    }
}

/// Batch statistics versus running statistics for normalized layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub fn leaky_relu(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        slope * x
    }
}

fn leaky_relu_grad(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        slope
    }
}

#[derive(Debug, Clone)]
struct BnCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
    mean: Array1<f64>,
    var: Array1<f64>,
}

#[derive(Debug, Clone)]
struct LayerCache {
    input: Array2<f64>,
    /// Activation input (after normalization when present).
    pre: Array2<f64>,
    bn: Option<BnCache>,
}

/// Intermediate values from a forward pass, consumed by [`NetParams::backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    layers: Vec<LayerCache>,
    mode: Mode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    /// `(dgamma, dbeta)` for normalized layers.
    pub bn: Option<(Array1<f64>, Array1<f64>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetGrads {
    pub layers: Vec<LayerGrads>,
}

impl NetGrads {
    pub fn tensors(&self) -> Vec<ArrayViewD<'_, f64>> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(l.weight.view().into_dyn());
            out.push(l.bias.view().into_dyn());
            if let Some((g, b)) = &l.bn {
                out.push(g.view().into_dyn());
                out.push(b.view().into_dyn());
            }
        }
        out
    }
}

/// Learned parameters of a dense network described by an [`MlpSpec`].
#[derive(Debug, Clone, PartialEq)]
pub struct NetParams {
    pub spec: MlpSpec,
    pub layers: Vec<Layer>,
}

impl NetParams {
    pub fn zeros(spec: &MlpSpec) -> Result<Self> {
        spec.validate()?;
        let layers = spec
            .layer_dims
            .windows(2)
            .zip(&spec.batchnorm)
            .map(|(w, &bn)| Layer::zeros(w[0], w[1], bn))
            .collect();
        Ok(Self {
            spec: spec.clone(),
            layers,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.spec.output_dim()
    }

    fn check_input(&self, x: &ArrayView2<'_, f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::invalid(format!(
                "network expects {} input columns, got {}",
                self.input_dim(),
                x.ncols()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>, mode: Mode) -> Result<Array2<f64>> {
        self.forward_cached(x, mode).map(|(y, _)| y)
    }

    pub fn forward_cached(
        &self,
        x: ArrayView2<'_, f64>,
        mode: Mode,
    ) -> Result<(Array2<f64>, ForwardCache)> {
        self.check_input(&x)?;
        let slope = self.spec.slope;
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut h = x.to_owned();
        for layer in &self.layers {
            let z = layer.affine(h.view());
            let (pre, bn) = match &layer.bn {
                None => (z, None),
                Some(bn) => {
                    let (mean, var) = match mode {
                        Mode::Train => {
                            let mean = z.mean_axis(Axis(0)).expect("non-empty batch");
                            let var = z.var_axis(Axis(0), 0.0);
                            (mean, var)
                        }
                        Mode::Eval => (bn.running_mean.clone(), bn.running_var.clone()),
                    };
                    let inv_std = var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
                    let xhat = (&z - &mean) * &inv_std;
                    let pre = &xhat * &bn.gamma + &bn.beta;
                    (pre, Some(BnCache { xhat, inv_std, mean, var }))
                }
            };
            let out = pre.mapv(|v| leaky_relu(v, slope));
            caches.push(LayerCache {
                input: h,
                pre,
                bn,
            });
            h = out;
        }
        Ok((h, ForwardCache { layers: caches, mode }))
    }

    /// Gradients of a scalar loss given `grad_out = dL/d(output)`.
    /// Returns parameter gradients and `dL/d(input)`.
    pub fn backward(&self, cache: &ForwardCache, grad_out: ArrayView2<'_, f64>) -> (NetGrads, Array2<f64>) {
        let slope = self.spec.slope;
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut g = grad_out.to_owned();
        for (layer, lc) in self.layers.iter().zip(&cache.layers).rev() {
            Zip::from(&mut g)
                .and(&lc.pre)
                .for_each(|g, &p| *g *= leaky_relu_grad(p, slope));
            let (dz, bn_grads) = match (&layer.bn, &lc.bn) {
                (Some(bn), Some(bc)) => {
                    let dgamma = (&g * &bc.xhat).sum_axis(Axis(0));
                    let dbeta = g.sum_axis(Axis(0));
                    let dxhat = &g * &bn.gamma;
                    let dz = match cache.mode {
                        Mode::Eval => dxhat * &bc.inv_std,
                        Mode::Train => {
                            let b = g.nrows() as f64;
                            let sum_dxhat = dxhat.sum_axis(Axis(0));
                            let sum_dxhat_xhat = (&dxhat * &bc.xhat).sum_axis(Axis(0));
                            let mut dz = dxhat * b - &sum_dxhat - &bc.xhat * &sum_dxhat_xhat;
                            dz *= &(&bc.inv_std / b);
                            dz
                        }
                    };
                    (dz, Some((dgamma, dbeta)))
                }
                _ => (g, None),
            };
            let (dw, db, dx) = layer.affine_backward(lc.input.view(), dz.view());
            grads.push(LayerGrads {
                weight: dw,
                bias: db,
                bn: bn_grads,
            });
            g = dx;
        }
        grads.reverse();
        (NetGrads { layers: grads }, g)
    }

    /// Fold a training-mode forward pass's batch statistics into the running statistics.
    pub fn update_running_stats(&mut self, cache: &ForwardCache) {
        if cache.mode != Mode::Train {
            return;
        }
        for (layer, lc) in self.layers.iter_mut().zip(&cache.layers) {
            if let (Some(bn), Some(bc)) = (&mut layer.bn, &lc.bn) {
                let b = lc.input.nrows() as f64;
                let unbiased = if b > 1.0 { &bc.var * (b / (b - 1.0)) } else { bc.var.clone() };
                bn.running_mean = &bn.running_mean * (1.0 - BN_MOMENTUM) + &bc.mean * BN_MOMENTUM;
                bn.running_var = &bn.running_var * (1.0 - BN_MOMENTUM) + unbiased * BN_MOMENTUM;
            }
        }
    }

    /// Learnable tensors, in the same order as [`NetGrads::tensors`].
    pub fn learnable_mut(&mut self) -> Vec<ArrayViewMutD<'_, f64>> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push(l.weight.view_mut().into_dyn());
            out.push(l.bias.view_mut().into_dyn());
            if let Some(bn) = &mut l.bn {
                out.push(bn.gamma.view_mut().into_dyn());
                out.push(bn.beta.view_mut().into_dyn());
            }
        }
        out
    }

    /// Every stored tensor, learnable or not, in checkpoint order.
    pub fn named_tensors(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layer{i}.weight"), l.weight.view().into_dyn()));
            out.push((format!("layer{i}.bias"), l.bias.view().into_dyn()));
            if let Some(bn) = &l.bn {
                out.push((format!("layer{i}.bn.gamma"), bn.gamma.view().into_dyn()));
                out.push((format!("layer{i}.bn.beta"), bn.beta.view().into_dyn()));
                out.push((format!("layer{i}.bn.running_mean"), bn.running_mean.view().into_dyn()));
                out.push((format!("layer{i}.bn.running_var"), bn.running_var.view().into_dyn()));
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<ArrayViewMutD<'_, f64>> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push(l.weight.view_mut().into_dyn());
            out.push(l.bias.view_mut().into_dyn());
            if let Some(bn) = &mut l.bn {
                out.push(bn.gamma.view_mut().into_dyn());
                out.push(bn.beta.view_mut().into_dyn());
                out.push(bn.running_mean.view_mut().into_dyn());
                out.push(bn.running_var.view_mut().into_dyn());
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }
}

/// Xavier-initialized parameters for `spec`; identical for identical seeds.
pub fn init_params(spec: &MlpSpec, seed: u64) -> Result<NetParams> {
    spec.validate()?;
    let mut rng = seed::rng(seed, "xavier");
    let layers = spec
        .layer_dims
        .windows(2)
        .zip(&spec.batchnorm)
        .map(|(w, &bn)| Layer::xavier(w[0], w[1], bn, &mut rng))
        .collect();
    Ok(NetParams {
        spec: spec.clone(),
        layers,
    })
}

/// Logistic function, stable for large `|x|`.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
