//! Minimal dense networks with exact reverse-mode gradients.
//!
//! Everything downstream (decoder terms, encoder heads, constraint
//! penalties) differentiates through these fixed-shape networks, so the
//! backward pass here is the single source of gradient truth. Batches are
//! row-major: `x` is `[N x in_dim]`, a layer computes `act(x W^T + b)`.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Element-wise activation applied after the affine transform.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Softplus,
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Softplus => softplus(z),
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative as a function of the pre-activation.
    #[inline]
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Softplus => sigmoid(z),
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Numerically stable `ln(1 + exp(x))`.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// One dense layer: `y = activation(x W^T + b)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DenseLayer {
    /// Weight matrix with shape `[out_dim x in_dim]`.
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn new(weights: Array2<f64>, bias: Array1<f64>, activation: Activation) -> Result<Self> {
        if weights.nrows() != bias.len() {
            return Err(Error::shape(
                "dense layer",
                format!("bias of length {}", weights.nrows()),
                format!("{}", bias.len()),
            ));
        }
        if weights.iter().any(|w| !w.is_finite()) || bias.iter().any(|b| !b.is_finite()) {
            return Err(Error::Numeric("non-finite layer parameters".into()));
        }
        Ok(DenseLayer {
            weights,
            bias,
            activation,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.nrows()
    }
}

/// A feedforward network of dense layers; the final layer is always `Identity`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DenseNet {
    pub layers: Vec<DenseLayer>,
}

impl DenseNet {
    /// Builds a network from explicit layers, validating the chaining and
    /// the identity-output invariant.
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Argument("a network needs at least one layer".into()));
        }
        for (k, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::shape(
                    format!("layer {} -> {}", k, k + 1),
                    format!("in_dim {}", pair[0].out_dim()),
                    format!("{}", pair[1].in_dim()),
                ));
            }
        }
        if layers.last().unwrap().activation != Activation::Identity {
            return Err(Error::Argument(
                "final layer activation must be Identity".into(),
            ));
        }
        Ok(DenseNet { layers })
    }

    /// Glorot-uniform initialised MLP: `dims = [in, h1, ..., out]`, hidden
    /// layers use `hidden_activation`, the output layer is `Identity`,
    /// biases start at zero.
    pub fn mlp<R: Rng + ?Sized>(
        dims: &[usize],
        hidden_activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Argument("need input and output dimensions".into()));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Argument("layer dimensions must be positive".into()));
        }
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for k in 0..dims.len() - 1 {
            let (fan_in, fan_out) = (dims[k], dims[k + 1]);
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let dist = Uniform::new(-a, a).expect("valid init range");
            let weights =
                Array2::from_shape_fn((fan_out, fan_in), |_| dist.sample(rng));
            let act = if k + 2 == dims.len() {
                Activation::Identity
            } else {
                hidden_activation
            };
            layers.push(DenseLayer::new(weights, Array1::zeros(fan_out), act)?);
        }
        DenseNet::new(layers)
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    /// Forward pass without caching, for pure evaluation.
    pub fn forward(&self, x: &ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(x)?;
        let mut a = x.to_owned();
        for layer in &self.layers {
            a = affine(&a.view(), layer);
            if layer.activation != Activation::Identity {
                a.mapv_inplace(|z| layer.activation.apply(z));
            }
        }
        Ok(a)
    }

    /// Forward pass that retains per-layer inputs and pre-activations so
    /// `backward` can run on the same batch.
    pub fn forward_cached(&self, x: &ArrayView2<f64>) -> Result<(Array2<f64>, ForwardCache)> {
        self.check_input(x)?;
        let n = x.nrows();
        let mut layer_inputs = Vec::with_capacity(self.layers.len());
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        let mut a = x.to_owned();
        for layer in &self.layers {
            let z = affine(&a.view(), layer);
            layer_inputs.push(a);
            a = if layer.activation == Activation::Identity {
                z.clone()
            } else {
                z.mapv(|v| layer.activation.apply(v))
            };
            pre_activations.push(z);
        }
        Ok((
            a,
            ForwardCache {
                batch_rows: n,
                layer_inputs,
                pre_activations,
            },
        ))
    }

    /// Reverse-mode pass. `upstream` holds `d(loss)/d(output)` with shape
    /// `[N x out_dim]`; returns parameter gradients plus the gradient with
    /// respect to the network input (needed to chain encoder and decoder).
    pub fn backward(
        &self,
        cache: &ForwardCache,
        upstream: &ArrayView2<f64>,
    ) -> Result<(GradientTape, Array2<f64>)> {
        if cache.layer_inputs.len() != self.layers.len() {
            return Err(Error::State(
                "forward cache does not match this network".into(),
            ));
        }
        if upstream.nrows() != cache.batch_rows || upstream.ncols() != self.output_dim() {
            return Err(Error::shape(
                "backward upstream",
                format!("[{} x {}]", cache.batch_rows, self.output_dim()),
                format!("[{} x {}]", upstream.nrows(), upstream.ncols()),
            ));
        }
        let mut tape = GradientTape::zeros_like(self);
        let mut grad = upstream.to_owned();
        for (k, layer) in self.layers.iter().enumerate().rev() {
            let z = &cache.pre_activations[k];
            if z.nrows() != cache.batch_rows || z.ncols() != layer.out_dim() {
                return Err(Error::State("stale forward cache".into()));
            }
            if layer.activation != Activation::Identity {
                grad.zip_mut_with(z, |g, &zv| *g *= layer.activation.derivative(zv));
            }
            let input = &cache.layer_inputs[k];
            // dot may return an F-order array for transposed operands
            tape.layers[k].0 = grad.t().dot(input).as_standard_layout().into_owned();
            tape.layers[k].1 = grad.sum_axis(Axis(0));
            grad = grad.dot(&layer.weights);
        }
        tape.accumulations = 1;
        Ok((tape, grad))
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::shape(
                "network input (layer 0)",
                format!("{} columns", self.input_dim()),
                format!("{}", x.ncols()),
            ));
        }
        Ok(())
    }
}

#[inline]
fn affine(x: &ArrayView2<f64>, layer: &DenseLayer) -> Array2<f64> {
    let mut z = x.dot(&layer.weights.t());
    z += &layer.bias;
    z
}

/// Per-layer inputs and pre-activations retained by `forward_cached`.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    batch_rows: usize,
    layer_inputs: Vec<Array2<f64>>,
    pre_activations: Vec<Array2<f64>>,
}

impl ForwardCache {
    pub fn batch_rows(&self) -> usize {
        self.batch_rows
    }
}

/// Parameter gradients aligned one-to-one with a `DenseNet`.
#[derive(Debug, Clone)]
pub struct GradientTape {
    /// `(d_weights, d_bias)` per layer, same shapes as the network.
    pub layers: Vec<(Array2<f64>, Array1<f64>)>,
    /// How many backward passes have been accumulated into this tape.
    pub accumulations: usize,
}

impl GradientTape {
    pub fn zeros_like(net: &DenseNet) -> Self {
        GradientTape {
            layers: net
                .layers
                .iter()
                .map(|l| {
                    (
                        Array2::zeros((l.out_dim(), l.in_dim())),
                        Array1::zeros(l.out_dim()),
                    )
                })
                .collect(),
            accumulations: 0,
        }
    }

    pub fn zero(&mut self) {
        for (w, b) in &mut self.layers {
            w.fill(0.0);
            b.fill(0.0);
        }
        self.accumulations = 0;
    }

    /// Adds `scale * other` into this tape.
    pub fn add_scaled(&mut self, other: &GradientTape, scale: f64) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::shape(
                "gradient tape accumulation",
                format!("{} layers", self.layers.len()),
                format!("{}", other.layers.len()),
            ));
        }
        for ((w, b), (ow, ob)) in self.layers.iter_mut().zip(&other.layers) {
            if w.dim() != ow.dim() || b.len() != ob.len() {
                return Err(Error::shape(
                    "gradient tape accumulation",
                    format!("{:?}", w.dim()),
                    format!("{:?}", ow.dim()),
                ));
            }
            w.scaled_add(scale, ow);
            b.scaled_add(scale, ob);
        }
        self.accumulations += other.accumulations;
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for (w, b) in &mut self.layers {
            w.mapv_inplace(|v| v * s);
            b.mapv_inplace(|v| v * s);
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|(w, b)| w.iter().chain(b.iter()))
            .fold(0.0_f64, |m, &g| m.max(g.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|(w, b)| w.iter().all(|g| g.is_finite()) && b.iter().all(|g| g.is_finite()))
    }
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamParams {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamParams {
    pub fn with_learning_rate(lr: f64) -> Self {
        AdamParams {
            learning_rate: lr,
            ..AdamParams::default()
        }
    }
}

#[inline]
fn adam_update(p: &mut f64, g: f64, m: &mut f64, v: &mut f64, t: u64, hp: &AdamParams) {
    *m = hp.beta1 * *m + (1.0 - hp.beta1) * g;
    *v = hp.beta2 * *v + (1.0 - hp.beta2) * g * g;
    let m_hat = *m / (1.0 - hp.beta1.powi(t as i32));
    let v_hat = *v / (1.0 - hp.beta2.powi(t as i32));
    *p -= hp.learning_rate * m_hat / (v_hat.sqrt() + hp.epsilon);
}

/// Plain gradient-descent update `param -= lr * grad`. The
/// differential-multiplier dynamics analysis assumes these unnormalised
/// steps, so the constrained-optimization comparison uses them; model
/// training uses Adam.
pub fn sgd_step(net: &mut DenseNet, tape: &GradientTape, lr: f64) -> Result<()> {
    if tape.layers.len() != net.layers.len() {
        return Err(Error::shape(
            "sgd step",
            format!("{} layers", net.layers.len()),
            format!("{}", tape.layers.len()),
        ));
    }
    for (layer, (gw, gb)) in net.layers.iter_mut().zip(&tape.layers) {
        if gw.iter().any(|g| !g.is_finite()) || gb.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numeric("non-finite gradient in sgd step".into()));
        }
        layer.weights.scaled_add(-lr, gw);
        layer.bias.scaled_add(-lr, gb);
    }
    Ok(())
}

/// Adam moment accumulators mirroring a network's layer shapes.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<(Array2<f64>, Array1<f64>)>,
    v: Vec<(Array2<f64>, Array1<f64>)>,
    t: u64,
    pub hyper: AdamParams,
}

impl AdamState {
    pub fn for_net(net: &DenseNet, hyper: AdamParams) -> Self {
        let zeros = || {
            net.layers
                .iter()
                .map(|l| {
                    (
                        Array2::zeros((l.out_dim(), l.in_dim())),
                        Array1::zeros(l.out_dim()),
                    )
                })
                .collect::<Vec<_>>()
        };
        AdamState {
            m: zeros(),
            v: zeros(),
            t: 0,
            hyper,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One Adam update of every parameter in `net` from `tape`.
    pub fn step(&mut self, net: &mut DenseNet, tape: &GradientTape) -> Result<()> {
        if tape.layers.len() != net.layers.len() || self.m.len() != net.layers.len() {
            return Err(Error::shape(
                "adam step",
                format!("{} layers", net.layers.len()),
                format!("{}", tape.layers.len()),
            ));
        }
        for (k, ((gw, gb), layer)) in tape.layers.iter().zip(&net.layers).enumerate() {
            if gw.dim() != layer.weights.dim() || gb.len() != layer.bias.len() {
                return Err(Error::shape(
                    format!("adam step, layer {k}"),
                    format!("{:?}", layer.weights.dim()),
                    format!("{:?}", gw.dim()),
                ));
            }
            if gw.iter().any(|g| !g.is_finite()) || gb.iter().any(|g| !g.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient in layer {k}"
                )));
            }
        }
        self.t += 1;
        let t = self.t;
        let hp = self.hyper;
        for (k, layer) in net.layers.iter_mut().enumerate() {
            let (gw, gb) = &tape.layers[k];
            let (mw, mb) = &mut self.m[k];
            let (vw, vb) = &mut self.v[k];
            for (((p, &g), m), v) in layer
                .weights
                .iter_mut()
                .zip(gw.iter())
                .zip(mw.iter_mut())
                .zip(vw.iter_mut())
            {
                adam_update(p, g, m, v, t, &hp);
            }
            for (((p, &g), m), v) in layer
                .bias
                .iter_mut()
                .zip(gb.iter())
                .zip(mb.iter_mut())
                .zip(vb.iter_mut())
            {
                adam_update(p, g, m, v, t, &hp);
            }
        }
        Ok(())
    }
}

/// Adam state for a flat parameter block (intercepts, noise scales, mask
/// logits) that is not a `DenseNet`.
#[derive(Debug, Clone)]
pub struct FlatAdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    pub hyper: AdamParams,
}

impl FlatAdamState {
    pub fn new(len: usize, hyper: AdamParams) -> Self {
        FlatAdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            hyper,
        }
    }

    pub fn step<'a, P, G>(&mut self, params: P, grads: G, block: &str) -> Result<()>
    where
        P: Iterator<Item = &'a mut f64>,
        G: Iterator<Item = f64>,
    {
        self.t += 1;
        let t = self.t;
        let hp = self.hyper;
        let mut count = 0usize;
        for ((p, g), (m, v)) in params
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            if !g.is_finite() {
                return Err(Error::Numeric(format!("non-finite gradient in {block}")));
            }
            adam_update(p, g, m, v, t, &hp);
            count += 1;
        }
        if count != self.m.len() {
            return Err(Error::shape(
                format!("adam step on {block}"),
                format!("{} parameters", self.m.len()),
                format!("{count}"),
            ));
        }
        Ok(())
    }
}

/// Per-block outcome of a finite-difference gradient audit.
#[derive(Debug, Clone)]
pub struct FdBlock {
    pub block: String,
    pub max_rel_error: f64,
    pub exceeds_tol: bool,
}

/// Report produced by [`finite_diff_check`].
#[derive(Debug, Clone)]
pub struct FdReport {
    pub blocks: Vec<FdBlock>,
    pub max_rel_error: f64,
    pub tol: f64,
}

impl FdReport {
    pub fn passed(&self) -> bool {
        self.blocks.iter().all(|b| !b.exceeds_tol)
    }
}

pub(crate) fn fd_rel_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / scale
}

/// Compares analytic gradients of `loss_value(net(points))` against central
/// finite differences, block by block. `loss_grad` must return
/// `d(loss)/d(outputs)` for the same batch.
pub fn finite_diff_check<V, G>(
    net: &mut DenseNet,
    points: &ArrayView2<f64>,
    loss_value: V,
    loss_grad: G,
    step: f64,
    tol: f64,
) -> Result<FdReport>
where
    V: Fn(&ArrayView2<f64>) -> f64,
    G: Fn(&ArrayView2<f64>) -> Array2<f64>,
{
    if step <= 0.0 {
        return Err(Error::Argument("finite-difference step must be > 0".into()));
    }
    let (out, cache) = net.forward_cached(&points.view())?;
    let upstream = loss_grad(&out.view());
    let (tape, _) = net.backward(&cache, &upstream.view())?;

    let mut blocks = Vec::new();
    let mut overall: f64 = 0.0;
    let n_layers = net.layers.len();
    for k in 0..n_layers {
        for weights_block in [true, false] {
            let len = if weights_block {
                net.layers[k].weights.len()
            } else {
                net.layers[k].bias.len()
            };
            let mut block_err: f64 = 0.0;
            for idx in 0..len {
                let analytic = if weights_block {
                    tape.layers[k].0.as_slice().unwrap()[idx]
                } else {
                    tape.layers[k].1[idx]
                };
                let numeric = {
                    let eval = |net: &DenseNet| -> Result<f64> {
                        let y = net.forward(&points.view())?;
                        Ok(loss_value(&y.view()))
                    };
                    let read = |net: &DenseNet| {
                        if weights_block {
                            net.layers[k].weights.as_slice().unwrap()[idx]
                        } else {
                            net.layers[k].bias[idx]
                        }
                    };
                    let write = |net: &mut DenseNet, v: f64| {
                        if weights_block {
                            net.layers[k].weights.as_slice_mut().unwrap()[idx] = v;
                        } else {
                            net.layers[k].bias[idx] = v;
                        }
                    };
                    let orig = read(net);
                    write(net, orig + step);
                    let plus = eval(net)?;
                    write(net, orig - step);
                    let minus = eval(net)?;
                    write(net, orig);
                    (plus - minus) / (2.0 * step)
                };
                block_err = block_err.max(fd_rel_error(analytic, numeric));
            }
            overall = overall.max(block_err);
            blocks.push(FdBlock {
                block: format!(
                    "layer {k} {}",
                    if weights_block { "weights" } else { "bias" }
                ),
                max_rel_error: block_err,
                exceeds_tol: block_err >= tol,
            });
        }
    }
    Ok(FdReport {
        blocks,
        max_rel_error: overall,
        tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn single_layer(w: f64, b: f64) -> DenseNet {
        DenseNet::new(vec![DenseLayer::new(
            array![[w]],
            array![b],
            Activation::Identity,
        )
        .unwrap()])
        .unwrap()
    }

    #[test]
    fn identity_map_forward() {
        let net = single_layer(1.0, 0.0);
        let y = net.forward(&array![[2.0]].view()).unwrap();
        assert_eq!(y, array![[2.0]]);
    }

    #[test]
    fn relu_final_layer_rejected() {
        let err = DenseNet::new(vec![DenseLayer::new(
            array![[1.0]],
            array![0.0],
            Activation::Relu,
        )
        .unwrap()])
        .unwrap_err();
        assert!(matches!(err, Error::Argument(_)));
    }

    #[test]
    fn zero_weight_softplus_net_outputs_zero() {
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let mut net = DenseNet::mlp(&[1, 64, 1], Activation::Softplus, &mut rng).unwrap();
        for layer in &mut net.layers {
            layer.weights.fill(0.0);
            layer.bias.fill(0.0);
        }
        let y = net
            .forward(&array![[-3.0], [0.0], [17.5]].view())
            .unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn input_dim_mismatch_is_shape_error() {
        let net = single_layer(1.0, 0.0);
        let err = net.forward(&array![[1.0, 2.0]].view()).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn linear_backward_matches_hand_derivation() {
        // y = w x + b at x = 3, upstream 1: dL/dw = 3, dL/db = 1.
        let net = single_layer(2.0, 0.5);
        let (_, cache) = net.forward_cached(&array![[3.0]].view()).unwrap();
        let (tape, input_grad) = net.backward(&cache, &array![[1.0]].view()).unwrap();
        assert_abs_diff_eq!(tape.layers[0].0[[0, 0]], 3.0);
        assert_abs_diff_eq!(tape.layers[0].1[0], 1.0);
        assert_abs_diff_eq!(input_grad[[0, 0]], 2.0);
    }

    #[test]
    fn zero_upstream_gives_zero_tape() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let net = DenseNet::mlp(&[2, 8, 3], Activation::Tanh, &mut rng).unwrap();
        let x = Array2::from_shape_fn((4, 2), |_| rng.random_range(-1.0..1.0));
        let (_, cache) = net.forward_cached(&x.view()).unwrap();
        let (tape, input_grad) = net
            .backward(&cache, &Array2::zeros((4, 3)).view())
            .unwrap();
        assert_eq!(tape.max_abs(), 0.0);
        assert!(input_grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn stale_cache_rejected() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let net = DenseNet::mlp(&[2, 4, 1], Activation::Tanh, &mut rng).unwrap();
        let other = DenseNet::mlp(&[2, 1], Activation::Tanh, &mut rng).unwrap();
        let (_, cache) = net.forward_cached(&array![[0.1, 0.2]].view()).unwrap();
        let err = other
            .backward(&cache, &array![[1.0]].view())
            .unwrap_err();
        assert!(matches!(err, Error::State(_)));
    }

    /// Finite-difference oracle over every activation and depths 1-3.
    /// ReLU points are screened so no pre-activation sits within 1e-3 of
    /// zero, where the derivative is not defined.
    #[test]
    fn gradients_match_finite_differences_for_all_activations() {
        let mut rng = ChaCha12Rng::seed_from_u64(42);
        let sum_loss = |y: &ArrayView2<f64>| y.iter().map(|v| v * v).sum::<f64>();
        let sum_grad = |y: &ArrayView2<f64>| y.mapv(|v| 2.0 * v);
        for act in [
            Activation::Relu,
            Activation::Softplus,
            Activation::Tanh,
            Activation::Identity,
        ] {
            for dims in [vec![1, 8, 1], vec![2, 8, 8, 2], vec![3, 8, 8, 8, 1]] {
                let mut net = DenseNet::mlp(&dims, act, &mut rng).unwrap();
                let mut points =
                    Array2::from_shape_fn((10, dims[0]), |_| rng.random_range(-2.0..2.0));
                if act == Activation::Relu {
                    points = screen_relu_points(&net, points, &mut rng);
                }
                let report =
                    finite_diff_check(&mut net, &points.view(), sum_loss, sum_grad, 1e-5, 1e-4)
                        .unwrap();
                assert!(
                    report.passed(),
                    "activation {act:?} dims {dims:?}: max rel err {}",
                    report.max_rel_error
                );
            }
        }
    }

    fn screen_relu_points(
        net: &DenseNet,
        mut points: Array2<f64>,
        rng: &mut ChaCha12Rng,
    ) -> Array2<f64> {
        'rows: for mut row in points.rows_mut() {
            for _ in 0..200 {
                let x = row.to_owned().insert_axis(ndarray::Axis(0));
                let (_, cache) = net.forward_cached(&x.view()).unwrap();
                let near_kink = cache
                    .pre_activations
                    .iter()
                    .any(|z| z.iter().any(|v| v.abs() < 1e-3));
                if !near_kink {
                    continue 'rows;
                }
                for v in row.iter_mut() {
                    *v = rng.random_range(-2.0..2.0);
                }
            }
            panic!("could not find a point away from ReLU kinks");
        }
        points
    }

    #[test]
    fn linear_net_quadratic_loss_is_exact() {
        let mut net = single_layer(1.5, -0.25);
        let points = array![[0.3], [-1.1], [2.0]];
        let loss = |y: &ArrayView2<f64>| y.iter().map(|v| v * v).sum::<f64>();
        let grad = |y: &ArrayView2<f64>| y.mapv(|v| 2.0 * v);
        let report =
            finite_diff_check(&mut net, &points.view(), loss, grad, 1e-5, 1e-4).unwrap();
        assert!(report.max_rel_error < 1e-8, "{}", report.max_rel_error);
    }

    #[test]
    fn zero_step_is_argument_error() {
        let mut net = single_layer(1.0, 0.0);
        let points = array![[1.0]];
        let err = finite_diff_check(
            &mut net,
            &points.view(),
            |y| y.sum(),
            |y| Array2::ones(y.dim()),
            0.0,
            1e-4,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Argument(_)));
    }

    #[test]
    fn adam_zero_gradient_is_identity() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let mut net = DenseNet::mlp(&[2, 4, 1], Activation::Softplus, &mut rng).unwrap();
        let before = net.clone();
        let tape = GradientTape::zeros_like(&net);
        let mut adam = AdamState::for_net(&net, AdamParams::default());
        adam.step(&mut net, &tape).unwrap();
        assert_eq!(adam.step_count(), 1);
        for (a, b) in net.layers.iter().zip(&before.layers) {
            assert_eq!(a.weights, b.weights);
            assert_eq!(a.bias, b.bias);
        }
    }

    #[test]
    fn adam_first_step_magnitude_is_learning_rate_scaled() {
        // Closed form for t = 1: update = lr * g / (|g| + eps).
        for g in [0.5, -3.0, 1e-4] {
            let mut net = single_layer(1.0, 0.0);
            let mut tape = GradientTape::zeros_like(&net);
            tape.layers[0].0[[0, 0]] = g;
            let hp = AdamParams::default();
            let mut adam = AdamState::for_net(&net, hp);
            adam.step(&mut net, &tape).unwrap();
            let update = 1.0 - net.layers[0].weights[[0, 0]];
            let expected = hp.learning_rate * g / (g.abs() + hp.epsilon);
            assert!(
                (update - expected).abs() <= 1e-6 * expected.abs().max(1e-12),
                "g={g}: update {update} vs expected {expected}"
            );
        }
    }

    #[test]
    fn adam_monotone_under_constant_gradient() {
        let mut net = single_layer(1.0, 0.0);
        let mut tape = GradientTape::zeros_like(&net);
        tape.layers[0].0[[0, 0]] = 1.0;
        let mut adam = AdamState::for_net(&net, AdamParams::with_learning_rate(0.1));
        let mut last = net.layers[0].weights[[0, 0]];
        for _ in 0..2 {
            adam.step(&mut net, &tape).unwrap();
            let now = net.layers[0].weights[[0, 0]];
            assert!(now < last, "parameter should decrease: {now} !< {last}");
            last = now;
        }
    }

    #[test]
    fn adam_rejects_non_finite_gradients() {
        let mut net = single_layer(1.0, 0.0);
        let mut tape = GradientTape::zeros_like(&net);
        tape.layers[0].0[[0, 0]] = f64::NAN;
        let mut adam = AdamState::for_net(&net, AdamParams::default());
        let err = adam.step(&mut net, &tape).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
    }

    #[test]
    fn seeded_training_is_bitwise_deterministic() {
        let run = || {
            let mut rng = ChaCha12Rng::seed_from_u64(99);
            let mut net = DenseNet::mlp(&[2, 16, 2], Activation::Softplus, &mut rng).unwrap();
            let x = Array2::from_shape_fn((8, 2), |_| rng.random_range(-1.0..1.0));
            let target = Array2::from_shape_fn((8, 2), |_| rng.random_range(-1.0..1.0));
            let mut adam = AdamState::for_net(&net, AdamParams::default());
            for _ in 0..25 {
                let (y, cache) = net.forward_cached(&x.view()).unwrap();
                let upstream = &y - &target;
                let (tape, _) = net.backward(&cache, &upstream.view()).unwrap();
                adam.step(&mut net, &tape).unwrap();
            }
            net
        };
        let (a, b) = (run(), run());
        for (la, lb) in a.layers.iter().zip(&b.layers) {
            assert_eq!(la.weights, lb.weights);
            assert_eq!(la.bias, lb.bias);
        }
    }
}
