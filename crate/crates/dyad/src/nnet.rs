//! Minimal feedforward-network core: affine layers with Leaky-ReLU or
//! linear activations, exact reverse-mode gradients, and AdamW updates.
//! No computation graph — the encoder/decoder shapes used here are static,
//! so forward caches and a hand-written backward pass are all that's needed.

use crate::numkit::{Matrix, RngState};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Linear,
    LeakyRelu,
}

#[derive(Debug, Clone)]
pub struct Dense {
    /// `out x in`, row per output unit.
    pub w: Matrix,
    pub b: Vec<f64>,
    pub act: Activation,
}

/// Fully-connected network. `leaky_slope` applies to every Leaky-ReLU layer.
#[derive(Debug, Clone)]
pub struct DenseNet {
    pub layers: Vec<Dense>,
    pub leaky_slope: f64,
}

/// Per-layer cached tensors from a forward pass, enough for an exact
/// backward pass.
pub struct ForwardCache {
    /// Input to each layer (the batch itself for layer 0).
    inputs: Vec<Matrix>,
    /// Pre-activation values of each layer.
    preacts: Vec<Matrix>,
}

#[derive(Debug, Clone)]
pub struct LayerGrad {
    pub dw: Matrix,
    pub db: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct NetGradients {
    pub layers: Vec<LayerGrad>,
    /// Gradient with respect to the network input batch.
    pub dinput: Matrix,
}

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.01;

impl DenseNet {
    /// Builds a network from layer dimensions `[in, h1, ..., out]` with the
    /// given activation per layer. Weights and biases are drawn uniformly in
    /// `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn new(dims: &[usize], acts: &[Activation], rng: &mut RngState) -> Self {
        assert!(dims.len() >= 2, "need at least one layer");
        assert_eq!(acts.len(), dims.len() - 1, "one activation per layer");
        let mut layers = Vec::with_capacity(acts.len());
        for (idx, &act) in acts.iter().enumerate() {
            let (fan_in, fan_out) = (dims[idx], dims[idx + 1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let w = Matrix::from_fn(fan_out, fan_in, |_, _| rng.uniform(-bound, bound));
            let b = (0..fan_out).map(|_| rng.uniform(-bound, bound)).collect();
            layers.push(Dense { w, b, act });
        }
        Self {
            layers,
            leaky_slope: DEFAULT_LEAKY_SLOPE,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].w.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().w.rows()
    }

    /// Forward pass over a batch (row per example).
    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, ForwardCache)> {
        if x.cols() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: x.cols(),
                context: "network input",
            });
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut preacts = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for layer in &self.layers {
            let mut z = cur.matmul_transb(&layer.w);
            for i in 0..z.rows() {
                let row = z.row_mut(i);
                for (zj, bj) in row.iter_mut().zip(&layer.b) {
                    *zj += bj;
                }
            }
            inputs.push(cur);
            let a = match layer.act {
                Activation::Linear => z.clone(),
                Activation::LeakyRelu => {
                    let mut a = z.clone();
                    let s = self.leaky_slope;
                    for v in a.data_mut() {
                        if *v < 0.0 {
                            *v *= s;
                        }
                    }
                    a
                }
            };
            preacts.push(z);
            cur = a;
        }
        Ok((cur, ForwardCache { inputs, preacts }))
    }

    /// Reverse-mode gradients for the scalar loss whose gradient with
    /// respect to the network output is `upstream`.
    pub fn backward(&self, cache: &ForwardCache, upstream: &Matrix) -> Result<NetGradients> {
        if cache.preacts.len() != self.layers.len() {
            return Err(Error::ShapeMismatch("cache does not match network".into()));
        }
        let last = cache.preacts.last().unwrap();
        if upstream.rows() != last.rows() || upstream.cols() != last.cols() {
            return Err(Error::ShapeMismatch(format!(
                "upstream {}x{} vs output {}x{}",
                upstream.rows(),
                upstream.cols(),
                last.rows(),
                last.cols()
            )));
        }
        let mut grads: Vec<LayerGrad> = Vec::with_capacity(self.layers.len());
        let mut da = upstream.clone();
        for (li, layer) in self.layers.iter().enumerate().rev() {
            let z = &cache.preacts[li];
            let mut dz = da;
            if layer.act == Activation::LeakyRelu {
                let s = self.leaky_slope;
                for (g, zv) in dz.data_mut().iter_mut().zip(z.data()) {
                    if *zv < 0.0 {
                        *g *= s;
                    }
                }
            }
            let x = &cache.inputs[li];
            let dw = dz.matmul_transa(x);
            let mut db = vec![0.0; layer.b.len()];
            for i in 0..dz.rows() {
                for (dbj, dzj) in db.iter_mut().zip(dz.row(i)) {
                    *dbj += dzj;
                }
            }
            da = dz.matmul(&layer.w);
            grads.push(LayerGrad { dw, db });
        }
        grads.reverse();
        Ok(NetGradients {
            layers: grads,
            dinput: da,
        })
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.w.data().len() + l.b.len())
            .sum()
    }

    /// Flattens parameters layer by layer, weights then bias.
    pub fn params_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            v.extend_from_slice(l.w.data());
            v.extend_from_slice(&l.b);
        }
        v
    }

    pub fn set_params_vec(&mut self, v: &[f64]) {
        assert_eq!(v.len(), self.param_count(), "parameter vector length");
        let mut off = 0;
        for l in &mut self.layers {
            let wl = l.w.data().len();
            l.w.data_mut().copy_from_slice(&v[off..off + wl]);
            off += wl;
            let bl = l.b.len();
            l.b.copy_from_slice(&v[off..off + bl]);
            off += bl;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.w.is_finite() && l.b.iter().all(|x| x.is_finite()))
    }
}

impl NetGradients {
    /// Flattens in the same order as [`DenseNet::params_vec`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::new();
        for g in &self.layers {
            v.extend_from_slice(g.dw.data());
            v.extend_from_slice(&g.db);
        }
        v
    }

    pub fn add_scaled(&mut self, other: &NetGradients, alpha: f64) {
        assert_eq!(self.layers.len(), other.layers.len());
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.dw.axpy(alpha, &b.dw);
            for (x, y) in a.db.iter_mut().zip(&b.db) {
                *x += alpha * y;
            }
        }
    }
}

/// AdamW hyperparameters. Decay rates and epsilon follow the optimizer's
/// defining publication; everything is overridable through configuration.
#[derive(Debug, Clone, Copy)]
pub struct AdamW {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Per-parameter first/second moment accumulators plus the step counter.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub hyper: AdamW,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl OptimizerState {
    pub fn new(param_count: usize, hyper: AdamW) -> Self {
        Self {
            hyper,
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[f64], &[f64]) {
        (&self.m, &self.v)
    }

    /// One bias-corrected AdamW update over flat parameter/gradient views.
    pub fn update(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::ShapeMismatch(format!(
                "optimizer state {} vs params {} / grads {}",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let h = self.hyper;
        let bc1 = 1.0 - h.beta1.powi(self.step as i32);
        let bc2 = 1.0 - h.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let (p, g) = adamw_element(
                params[i], grads[i], &mut self.m[i], &mut self.v[i], bc1, bc2, h,
            );
            params[i] = p;
            let _ = g;
        }
        Ok(())
    }
}

/// Scalar AdamW kernel: updates the moment accumulators in place and
/// returns the new parameter value (second element is the applied delta).
#[inline]
pub fn adamw_element(
    p: f64,
    g: f64,
    m: &mut f64,
    v: &mut f64,
    bias_corr1: f64,
    bias_corr2: f64,
    h: AdamW,
) -> (f64, f64) {
    *m = h.beta1 * *m + (1.0 - h.beta1) * g;
    *v = h.beta2 * *v + (1.0 - h.beta2) * g * g;
    let mhat = *m / bias_corr1;
    let vhat = *v / bias_corr2;
    let delta = -h.learning_rate * (mhat / (vhat.sqrt() + h.epsilon) + h.weight_decay * p);
    (p + delta, delta)
}

/// Applies one AdamW step to a whole network.
pub fn adamw_step(net: &mut DenseNet, grads: &NetGradients, state: &mut OptimizerState) -> Result<()> {
    let mut params = net.params_vec();
    let flat = grads.flatten();
    state.update(&mut params, &flat)?;
    net.set_params_vec(&params);
    Ok(())
}

/// Copies weights between networks wherever layer shapes match, leaving
/// mismatched layers (typically the input/output layers of nets with
/// different observation dimensions) untouched. Returns the layer indices
/// copied.
pub fn transfer_matching_layers(src: &DenseNet, dst: &mut DenseNet) -> Vec<usize> {
    let mut copied = Vec::new();
    for (i, (s, d)) in src.layers.iter().zip(dst.layers.iter_mut()).enumerate() {
        if s.w.rows() == d.w.rows() && s.w.cols() == d.w.cols() {
            d.w = s.w.clone();
            d.b = s.b.clone();
            copied.push(i);
        }
    }
    copied
}
