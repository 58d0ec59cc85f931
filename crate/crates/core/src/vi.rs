//! Amortized Gaussian encoder, reparameterized ELBO, relaxed-Bernoulli
//! sparsity masks, and the constrained training loop.
//!
//! The training objective is `-ELBO + augmentation`, where the
//! augmentation carries the integral-constraint penalties. Once the
//! constraints are fulfilled the augmentation vanishes and the objective
//! reduces to the plain negative ELBO. All gradients returned by [`elbo`]
//! are gradients of that minimized loss.

use std::collections::BTreeMap;

use ndarray::{concatenate, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::constraint::{
    check_tolerance, multiplier_update, residuals, residuals_and_penalty,
    residuals_and_penalty_mc, ConstraintMethod, ConstraintSet, Estimator, PenaltySchedule,
    ToleranceReport,
};
use crate::decomp::{
    enumerate_terms, gather_columns, CoordKind, DecompositionModel, InputMeta, TermFilter,
    TermIndex, TermMasks, VarianceReport,
};
use crate::error::{Error, Result};
use crate::nn::{
    sigmoid, softplus, Activation, AdamParams, AdamState, DenseNet, FlatAdamState, GradientTape,
};

const SIGMA_FLOOR: f64 = 1e-8;

/// Kind of an observed covariate column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovariateKind {
    Continuous,
    Binary,
}

/// Observations plus covariates, the input to `fit`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Dataset {
    /// `[N x P]` feature matrix.
    pub y: Array2<f64>,
    /// `[N x dim_c]` covariates; binary columns hold {0, 1}.
    pub covariates: Array2<f64>,
    pub covariate_kinds: Vec<CovariateKind>,
    pub feature_names: Vec<String>,
    pub covariate_names: Vec<String>,
}

impl Dataset {
    pub fn n_rows(&self) -> usize {
        self.y.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.y.ncols()
    }

    pub fn n_covariates(&self) -> usize {
        self.covariates.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.y.nrows() == 0 {
            return Err(Error::Data("dataset has no rows".into()));
        }
        if self.covariates.nrows() != self.y.nrows() {
            return Err(Error::shape(
                "dataset covariates",
                format!("{} rows", self.y.nrows()),
                format!("{}", self.covariates.nrows()),
            ));
        }
        if self.covariate_kinds.len() != self.covariates.ncols() {
            return Err(Error::shape(
                "covariate kinds",
                format!("{}", self.covariates.ncols()),
                format!("{}", self.covariate_kinds.len()),
            ));
        }
        for (k, kind) in self.covariate_kinds.iter().enumerate() {
            if *kind == CovariateKind::Binary {
                if self
                    .covariates
                    .column(k)
                    .iter()
                    .any(|&v| v != 0.0 && v != 1.0)
                {
                    return Err(Error::Data(format!(
                        "binary covariate column {k} contains values outside {{0, 1}}"
                    )));
                }
            }
        }
        if self.y.iter().any(|v| !v.is_finite())
            || self.covariates.iter().any(|v| !v.is_finite())
        {
            return Err(Error::Data("dataset contains non-finite values".into()));
        }
        Ok(())
    }
}

/// Amortized Gaussian encoder: a shared trunk with mean and scale heads
/// realised as the two output blocks of one network. The scale is mapped
/// through softplus so it stays strictly positive.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EncoderState {
    pub net: DenseNet,
    pub z_dim: usize,
    pub include_covariates: bool,
}

impl EncoderState {
    pub fn new<R: Rng + ?Sized>(
        n_features: usize,
        n_covariates: usize,
        z_dim: usize,
        hidden: usize,
        activation: Activation,
        include_covariates: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if z_dim == 0 {
            return Err(Error::Argument("latent dimension must be >= 1".into()));
        }
        let in_dim = n_features + if include_covariates { n_covariates } else { 0 };
        let net = DenseNet::mlp(&[in_dim, hidden, 2 * z_dim], activation, rng)?;
        Ok(EncoderState {
            net,
            z_dim,
            include_covariates,
        })
    }

    fn input(&self, y: &ArrayView2<f64>, c: &ArrayView2<f64>) -> Array2<f64> {
        if self.include_covariates {
            concatenate(Axis(1), &[y.view(), c.view()]).expect("row counts match")
        } else {
            y.to_owned()
        }
    }

    /// Posterior mean and scale for a batch.
    pub fn encode(
        &self,
        y: &ArrayView2<f64>,
        c: &ArrayView2<f64>,
    ) -> Result<(Array2<f64>, Array2<f64>)> {
        let out = self.net.forward(&self.input(y, c).view())?;
        Ok(split_heads(&out, self.z_dim))
    }

    /// `z = mu + sigma * eps`, returning the sample with its parameters.
    pub fn encode_reparameterize(
        &self,
        y: &ArrayView2<f64>,
        c: &ArrayView2<f64>,
        eps: &ArrayView2<f64>,
    ) -> Result<(Array2<f64>, Array2<f64>, Array2<f64>)> {
        let (mu, sigma) = self.encode(y, c)?;
        if eps.dim() != mu.dim() {
            return Err(Error::shape(
                "reparameterization noise",
                format!("{:?}", mu.dim()),
                format!("{:?}", eps.dim()),
            ));
        }
        let z = &mu + &(&sigma * eps);
        Ok((z, mu, sigma))
    }
}

fn split_heads(out: &Array2<f64>, z_dim: usize) -> (Array2<f64>, Array2<f64>) {
    let mu = out.slice(ndarray::s![.., ..z_dim]).to_owned();
    let sigma = out
        .slice(ndarray::s![.., z_dim..])
        .mapv(|r| softplus(r) + SIGMA_FLOOR);
    (mu, sigma)
}

/// `KL(N(mu, sigma^2) || N(0, 1))`, summed over every entry.
pub fn kl_standard_normal(mu: &ArrayView2<f64>, sigma: &ArrayView2<f64>) -> Result<f64> {
    if mu.dim() != sigma.dim() {
        return Err(Error::shape(
            "kl inputs",
            format!("{:?}", mu.dim()),
            format!("{:?}", sigma.dim()),
        ));
    }
    if sigma.iter().any(|&s| s <= 0.0) {
        return Err(Error::Domain("posterior scale must be > 0".into()));
    }
    Ok(mu
        .iter()
        .zip(sigma.iter())
        .map(|(&m, &s)| 0.5 * (m * m + s * s - (s * s).ln() - 1.0))
        .sum())
}

/// Gaussian log-likelihood with per-feature noise scales, summed over the
/// batch.
pub fn gaussian_loglik(
    y: &ArrayView2<f64>,
    decoded: &ArrayView2<f64>,
    sigma: &ArrayView1<f64>,
) -> Result<f64> {
    if y.dim() != decoded.dim() {
        return Err(Error::shape(
            "gaussian log-likelihood",
            format!("{:?}", y.dim()),
            format!("{:?}", decoded.dim()),
        ));
    }
    if sigma.len() != y.ncols() {
        return Err(Error::shape(
            "noise scales",
            format!("{}", y.ncols()),
            format!("{}", sigma.len()),
        ));
    }
    if sigma.iter().any(|&s| s <= 0.0) {
        return Err(Error::Domain("noise scale must be > 0".into()));
    }
    const LN_2PI: f64 = 1.8378770664093453;
    let mut total = 0.0;
    for j in 0..y.ncols() {
        let s2 = sigma[j] * sigma[j];
        let base = -0.5 * (LN_2PI + s2.ln());
        for i in 0..y.nrows() {
            let r = y[[i, j]] - decoded[[i, j]];
            total += base - r * r / (2.0 * s2);
        }
    }
    Ok(total)
}

/// Sampling mode for the sparsity masks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// Relaxed-Bernoulli samples with a single-sample KL estimate.
    Stochastic,
    /// Deterministic expected values with zero KL contribution
    /// (evaluation only).
    Expected,
}

/// Relaxed-Bernoulli gates, one per (feature, term).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SparsityMasks {
    /// Variational logits `u`, shape `[P x T]`.
    pub logits: Array2<f64>,
    /// Term order matching the logit columns.
    pub terms: Vec<TermIndex>,
    /// Prior inclusion probability.
    pub p0: f64,
    pub temperature: f64,
    pub mode: MaskMode,
}

impl SparsityMasks {
    pub fn new(
        n_features: usize,
        terms: Vec<TermIndex>,
        p0: f64,
        temperature: f64,
    ) -> Result<Self> {
        if !(0.0 < p0 && p0 < 1.0) {
            return Err(Error::Argument(format!("p0 must lie in (0, 1), got {p0}")));
        }
        if temperature <= 0.0 {
            return Err(Error::Argument("temperature must be > 0".into()));
        }
        Ok(SparsityMasks {
            logits: Array2::zeros((n_features, terms.len())),
            terms,
            p0,
            temperature,
            mode: MaskMode::Stochastic,
        })
    }

    pub fn n_terms(&self) -> usize {
        self.terms.len()
    }

    /// Deterministic expected mask values `sigmoid(u)`.
    pub fn expected(&self) -> Array2<f64> {
        self.logits.mapv(sigmoid)
    }

    /// Expected masks packaged for decoding.
    pub fn expected_term_masks(&self) -> Result<TermMasks> {
        let e = self.expected();
        let mut map = BTreeMap::new();
        for (t, term) in self.terms.iter().enumerate() {
            map.insert(term.clone(), e.column(t).to_owned());
        }
        TermMasks::new(map)
    }
}

/// A single relaxed-Bernoulli draw plus its KL estimate.
pub struct MaskSample {
    /// `[P x T]` mask values in (0, 1).
    pub values: Array2<f64>,
    /// Single-sample `log q(s) - log p(s)` summed over entries.
    pub kl: f64,
    /// Gradient of the KL estimate w.r.t. the logits.
    pub kl_grad: Array2<f64>,
}

/// Draws mask values `s = sigmoid((u + L) / tau)` from logistic noise `L`,
/// with the KL estimated as the single-sample relaxed log-density ratio.
/// In `Expected` mode the draw is ignored and the KL is zero.
pub fn sample_masks(masks: &SparsityMasks, logistic_noise: &ArrayView2<f64>) -> Result<MaskSample> {
    if masks.mode == MaskMode::Expected {
        return Ok(MaskSample {
            values: masks.expected(),
            kl: 0.0,
            kl_grad: Array2::zeros(masks.logits.dim()),
        });
    }
    if logistic_noise.dim() != masks.logits.dim() {
        return Err(Error::shape(
            "mask noise",
            format!("{:?}", masks.logits.dim()),
            format!("{:?}", logistic_noise.dim()),
        ));
    }
    let tau = masks.temperature;
    let u0 = logit(masks.p0);
    // clamp keeps the open-interval invariant when low temperatures
    // saturate the sigmoid in double precision
    let values = ndarray::Zip::from(&masks.logits)
        .and(logistic_noise)
        .map_collect(|&u, &l| sigmoid((u + l) / tau).clamp(1e-12, 1.0 - 1e-12));
    // On the pre-sigmoid scale the density ratio collapses to
    //   delta + 2 (softplus(-L - delta) - softplus(-L)),  delta = u - u0,
    // because the sample's own location term cancels under
    // reparameterization; the ratio is invariant under the sigmoid.
    let mut kl = 0.0;
    let kl_grad = ndarray::Zip::from(&masks.logits)
        .and(logistic_noise)
        .map_collect(|&u, &l| {
            let delta = u - u0;
            kl += delta + 2.0 * (softplus(-l - delta) - softplus(-l));
            2.0 * sigmoid(l + delta) - 1.0
        });
    Ok(MaskSample {
        values,
        kl,
        kl_grad,
    })
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Exogenous randomness for one ELBO evaluation, held fixed so gradients
/// can be checked with common random numbers.
#[derive(Debug, Clone)]
pub struct NoiseDraws {
    /// `[N x z_dim]` standard normal draws.
    pub eps_z: Array2<f64>,
    /// `[P x T]` logistic draws for the masks, when masks are active.
    pub mask_logistic: Option<Array2<f64>>,
}

impl NoiseDraws {
    pub fn sample<R: Rng + ?Sized>(
        n: usize,
        z_dim: usize,
        mask_dim: Option<(usize, usize)>,
        rng: &mut R,
    ) -> Self {
        let normal = rand_distr::StandardNormal;
        let eps_z = Array2::from_shape_fn((n, z_dim), |_| {
            <rand_distr::StandardNormal as rand_distr::Distribution<f64>>::sample(&normal, rng)
        });
        let mask_logistic = mask_dim.map(|(p, t)| {
            Array2::from_shape_fn((p, t), |_| {
                let u: f64 = rng.random_range(1e-12..1.0 - 1e-12);
                (u / (1.0 - u)).ln()
            })
        });
        NoiseDraws {
            eps_z,
            mask_logistic,
        }
    }
}

/// Scalar pieces of one ELBO evaluation.
#[derive(Debug, Clone, Copy)]
pub struct ElboParts {
    pub elbo: f64,
    pub reconstruction: f64,
    pub kl_z: f64,
    pub kl_masks: f64,
}

/// Gradients of the minimized loss `-ELBO` for every trainable block.
pub struct ElboGrads {
    pub term_tapes: BTreeMap<TermIndex, GradientTape>,
    pub intercept: Array1<f64>,
    pub noise_log_scale: Array1<f64>,
    pub encoder: GradientTape,
    pub mask_logits: Option<Array2<f64>>,
}

/// One reparameterized ELBO evaluation with exact gradients.
///
/// `masks`, when present, must be in `Stochastic` mode with logistic noise
/// supplied in `draws`.
pub fn elbo(
    model: &DecompositionModel,
    encoder: &EncoderState,
    masks: Option<&SparsityMasks>,
    y: &ArrayView2<f64>,
    c: &ArrayView2<f64>,
    draws: &NoiseDraws,
) -> Result<(ElboParts, ElboGrads)> {
    let n = y.nrows();
    let p = model.n_features();
    let dz = encoder.z_dim;
    if y.ncols() != p {
        return Err(Error::shape(
            "elbo observations",
            format!("{p} features"),
            format!("{}", y.ncols()),
        ));
    }

    // encoder forward with cache
    let enc_in = encoder.input(y, c);
    let (enc_out, enc_cache) = encoder.net.forward_cached(&enc_in.view())?;
    let (mu, sigma) = split_heads(&enc_out, dz);
    let raw_scale = enc_out.slice(ndarray::s![.., dz..]).to_owned();
    if draws.eps_z.dim() != mu.dim() {
        return Err(Error::shape(
            "latent noise",
            format!("{:?}", mu.dim()),
            format!("{:?}", draws.eps_z.dim()),
        ));
    }
    let z = &mu + &(&sigma * &draws.eps_z);

    // decoder input: latent coordinates then covariates
    let x = concatenate(Axis(1), &[z.view(), c.view()]).expect("row counts match");

    // masks
    let mask_sample = if let Some(m) = masks {
        let noise = draws.mask_logistic.as_ref().ok_or_else(|| {
            Error::Argument("mask logistic noise missing from draws".into())
        })?;
        Some((m, sample_masks(m, &noise.view())?))
    } else {
        None
    };

    // term forward passes with caches
    let mut y_hat = Array2::zeros((n, p));
    y_hat += &model.intercept;
    let mut term_outputs = BTreeMap::new();
    for (ti, (term, net)) in model.terms.iter().enumerate() {
        let sub = gather_columns(&x.view(), term.coords());
        let (out, cache) = net.forward_cached(&sub.view())?;
        match &mask_sample {
            Some((m, s)) => {
                debug_assert_eq!(m.terms[ti], *term);
                for i in 0..n {
                    for j in 0..p {
                        y_hat[[i, j]] += s.values[[j, ti]] * out[[i, j]];
                    }
                }
            }
            None => y_hat += &out,
        }
        term_outputs.insert(term.clone(), (out, cache));
    }

    // scalar objective pieces
    let noise_sigma = model.noise_log_scale.mapv(f64::exp);
    let recon = gaussian_loglik(y, &y_hat.view(), &noise_sigma.view())?;
    let kl_z = kl_standard_normal(&mu.view(), &sigma.view())?;
    let kl_masks = mask_sample.as_ref().map_or(0.0, |(_, s)| s.kl);
    let parts = ElboParts {
        elbo: recon - kl_z - kl_masks,
        reconstruction: recon,
        kl_z,
        kl_masks,
    };
    if !parts.elbo.is_finite() {
        return Err(Error::Numeric("non-finite ELBO".into()));
    }

    // gradients of loss = -elbo
    // d(loss)/d(y_hat) = -(y - y_hat) / sigma_j^2
    let inv_var = noise_sigma.mapv(|s| 1.0 / (s * s));
    let mut g_yhat = Array2::zeros((n, p));
    for i in 0..n {
        for j in 0..p {
            g_yhat[[i, j]] = -(y[[i, j]] - y_hat[[i, j]]) * inv_var[j];
        }
    }

    // noise scales: d(loss)/d(ls_j) = sum_i [1 - r^2 / sigma_j^2]
    let mut g_noise = Array1::zeros(p);
    for j in 0..p {
        let mut acc = 0.0;
        for i in 0..n {
            let r = y[[i, j]] - y_hat[[i, j]];
            acc += 1.0 - r * r * inv_var[j];
        }
        g_noise[j] = acc;
    }

    // intercept
    let g_intercept = g_yhat.sum_axis(Axis(0));

    // terms: masked upstream, then chain input gradients into z
    let mut g_x = Array2::zeros((n, model.input_dim()));
    let mut term_tapes = BTreeMap::new();
    let mut g_mask_values: Option<Array2<f64>> =
        mask_sample.as_ref().map(|(m, _)| Array2::zeros(m.logits.dim()));
    for (ti, (term, net)) in model.terms.iter().enumerate() {
        let (out, cache) = &term_outputs[term];
        let upstream = match &mask_sample {
            Some((_, s)) => {
                let mut up = g_yhat.clone();
                for i in 0..n {
                    for j in 0..p {
                        up[[i, j]] *= s.values[[j, ti]];
                    }
                }
                // d(loss)/d(s_jt) = sum_i g_yhat[i,j] * out[i,j]
                let gm = g_mask_values.as_mut().unwrap();
                for j in 0..p {
                    let mut acc = 0.0;
                    for i in 0..n {
                        acc += g_yhat[[i, j]] * out[[i, j]];
                    }
                    gm[[j, ti]] = acc;
                }
                up
            }
            None => g_yhat.clone(),
        };
        let (tape, g_input) = net.backward(cache, &upstream.view())?;
        for (col, &coord) in term.coords().iter().enumerate() {
            for i in 0..n {
                g_x[[i, coord]] += g_input[[i, col]];
            }
        }
        term_tapes.insert(term.clone(), tape);
    }

    // mask logits: value path through s, plus the KL estimate's own gradient
    let g_mask_logits = match (&mask_sample, g_mask_values) {
        (Some((m, s)), Some(g_values)) => {
            let tau = m.temperature;
            let mut g = Array2::zeros(m.logits.dim());
            for j in 0..p {
                for t in 0..m.terms.len() {
                    let sv = s.values[[j, t]];
                    let ds_du = sv * (1.0 - sv) / tau;
                    g[[j, t]] = g_values[[j, t]] * ds_du + s.kl_grad[[j, t]];
                }
            }
            Some(g)
        }
        _ => None,
    };

    // latent path: g_z from the decoder input, plus KL terms
    let g_z = g_x.slice(ndarray::s![.., ..dz]);
    // d(loss)/d(mu) = g_z + mu ; d(loss)/d(sigma) = g_z * eps + sigma - 1/sigma
    let mut g_mu = g_z.to_owned();
    g_mu += &mu;
    let mut g_sigma = &g_z.to_owned() * &draws.eps_z;
    ndarray::Zip::from(&mut g_sigma).and(&sigma).for_each(|g, &s| {
        *g += s - 1.0 / s;
    });
    // through the softplus head
    let g_raw = &g_sigma * &raw_scale.mapv(sigmoid);
    let enc_upstream = concatenate(Axis(1), &[g_mu.view(), g_raw.view()]).unwrap();
    let (enc_tape, _) = encoder.net.backward(&enc_cache, &enc_upstream.view())?;

    Ok((
        parts,
        ElboGrads {
            term_tapes,
            intercept: g_intercept,
            noise_log_scale: g_noise,
            encoder: enc_tape,
            mask_logits: g_mask_logits,
        },
    ))
}

/// Decoder family fitted by `fit`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderVariant {
    /// Decomposed terms realised as affine maps, trained under constraints.
    Linear,
    /// Decomposed non-linear terms without identifiability constraints.
    NdUnconstrained,
    /// Decomposed non-linear terms under integral constraints.
    NdConstrained,
    /// A single joint decoder network over all inputs (standard CVAE
    /// baseline, no decomposition).
    Cvae,
}

impl DecoderVariant {
    pub fn constrained(self) -> bool {
        matches!(self, DecoderVariant::Linear | DecoderVariant::NdConstrained)
    }

    fn decomposed(self) -> bool {
        !matches!(self, DecoderVariant::Cvae)
    }
}

/// Everything `fit` needs to know.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    /// `None` selects full batch up to 2000 rows and 256 above.
    pub batch_size: Option<usize>,
    pub seed: u64,
    pub z_dim: usize,
    pub variant: DecoderVariant,
    pub adam: AdamParams,
    pub max_order: usize,
    pub hidden_units: usize,
    pub activation: Activation,
    pub method: ConstraintMethod,
    pub epsilon: f64,
    pub eta: f64,
    pub schedule: PenaltySchedule,
    pub grid_size: usize,
    /// Iterations of unconstrained training before the penalties engage;
    /// the first element of the growing penalty sequence is zero.
    pub constraint_warmup: usize,
    /// Iterations over which the penalty coefficient ramps linearly from
    /// zero to its scheduled value after the warmup; multiplier updates
    /// start once the ramp completes.
    pub constraint_ramp: usize,
    /// `Some(m)` estimates residuals with `m` Monte Carlo draws per
    /// conditioning point instead of quadrature.
    pub mc_residual_draws: Option<usize>,
    pub masks: bool,
    pub mask_temperature: f64,
    pub mask_prior: f64,
    pub mc_samples: usize,
    pub encoder_include_covariates: bool,
    pub encoder_hidden: usize,
    pub latent_domain: (f64, f64),
    /// After this fraction of the iterations, the learning rate decays
    /// exponentially to `lr_floor` times its initial value, letting the
    /// residuals settle under the penalty pressure.
    pub lr_decay_after: f64,
    pub lr_floor: f64,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 20_000,
            batch_size: None,
            seed: 0,
            z_dim: 1,
            variant: DecoderVariant::NdConstrained,
            adam: AdamParams::default(),
            max_order: 2,
            hidden_units: 64,
            activation: Activation::Softplus,
            method: ConstraintMethod::Mdmm,
            epsilon: 1e-2,
            eta: 0.02,
            schedule: PenaltySchedule::default(),
            grid_size: 32,
            constraint_warmup: 2_000,
            constraint_ramp: 2_000,
            mc_residual_draws: None,
            masks: true,
            mask_temperature: 0.5,
            mask_prior: 0.1,
            mc_samples: 1,
            encoder_include_covariates: true,
            encoder_hidden: 64,
            latent_domain: (-3.0, 3.0),
            lr_decay_after: 0.7,
            lr_floor: 0.05,
            log_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.z_dim == 0 {
            return Err(Error::Argument("z_dim must be >= 1".into()));
        }
        if self.max_order == 0 {
            return Err(Error::Argument("max_order must be >= 1".into()));
        }
        if self.mc_samples == 0 {
            return Err(Error::Argument("mc_samples must be >= 1".into()));
        }
        if self.epsilon <= 0.0 {
            return Err(Error::Argument("epsilon must be > 0".into()));
        }
        if self.log_every == 0 {
            return Err(Error::Argument("log_every must be >= 1".into()));
        }
        Ok(())
    }

    fn effective_batch(&self, n: usize) -> usize {
        match self.batch_size {
            Some(b) => b.clamp(1, n),
            None => {
                if n <= 2000 {
                    n
                } else {
                    256
                }
            }
        }
    }
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LogRow {
    pub iteration: usize,
    pub elbo: f64,
    pub reconstruction: f64,
    pub kl_z: f64,
    pub kl_masks: f64,
    pub max_residual: f64,
    pub c_t: f64,
}

/// Terminal state of a fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum FitStatus {
    /// Constraints satisfied at the configured tolerance (trivially true
    /// for unconstrained variants that happen to pass).
    Converged,
    /// Training finished but residuals exceed the tolerance.
    ToleranceFailed,
    /// Loss became non-finite; the returned model is the last good
    /// checkpoint.
    Diverged { at_iteration: usize },
}

/// Trained bundle returned by `fit`.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub model: DecompositionModel,
    pub encoder: EncoderState,
    pub masks: Option<SparsityMasks>,
    pub constraints: ConstraintSet,
    pub log: Vec<LogRow>,
    pub status: FitStatus,
    pub tolerance: ToleranceReport,
    /// Posterior mean latents for the full training set, `[N x z_dim]`.
    pub posterior_mean_z: Array2<f64>,
}

impl FitResult {
    /// Reference inputs for variance reporting: posterior-mean latents
    /// concatenated with the observed covariates.
    pub fn reference_inputs(&self, data: &Dataset) -> Array2<f64> {
        concatenate(
            Axis(1),
            &[self.posterior_mean_z.view(), data.covariates.view()],
        )
        .expect("row counts match")
    }

    /// Variance decomposition over the empirical reference measure, with
    /// expected-mode masks applied.
    pub fn variance_report(&self, data: &Dataset) -> Result<VarianceReport> {
        let reference = self.reference_inputs(data);
        let masks = match &self.masks {
            Some(m) => Some(m.expected_term_masks()?),
            None => None,
        };
        let mut report = self
            .model
            .term_variances(masks.as_ref(), &reference.view())?;
        report.feature_names = data.feature_names.clone();
        Ok(report)
    }
}

struct TrainState {
    model: DecompositionModel,
    encoder: EncoderState,
    masks: Option<SparsityMasks>,
    term_adam: BTreeMap<TermIndex, AdamState>,
    intercept_adam: FlatAdamState,
    noise_adam: FlatAdamState,
    encoder_adam: AdamState,
    mask_adam: Option<FlatAdamState>,
}

impl TrainState {
    fn snapshot(&self) -> (DecompositionModel, EncoderState, Option<SparsityMasks>) {
        (self.model.clone(), self.encoder.clone(), self.masks.clone())
    }
}

/// Builds the initial model for a dataset and config.
fn build_model<R: Rng + ?Sized>(
    data: &Dataset,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<(DecompositionModel, EncoderState, Option<SparsityMasks>)> {
    let p = data.n_features();
    let dc = data.n_covariates();
    let dz = cfg.z_dim;
    let d = dz + dc;

    let mut kinds = vec![CoordKind::Latent; dz];
    let mut domains = vec![cfg.latent_domain; dz];
    let mut names: Vec<String> = if dz == 1 {
        vec!["z".into()]
    } else {
        (1..=dz).map(|k| format!("z{k}")).collect()
    };
    for (k, kind) in data.covariate_kinds.iter().enumerate() {
        match kind {
            CovariateKind::Binary => {
                kinds.push(CoordKind::BinaryCovariate);
                domains.push((0.0, 1.0));
            }
            CovariateKind::Continuous => {
                kinds.push(CoordKind::Covariate);
                let col = data.covariates.column(k);
                let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                if !(lo < hi) {
                    return Err(Error::Data(format!(
                        "continuous covariate column {k} is constant"
                    )));
                }
                domains.push((lo, hi));
            }
        }
        names.push(data.covariate_names[k].clone());
    }
    let meta = InputMeta::new(kinds, domains, names)?;

    let term_indices = if cfg.variant.decomposed() {
        enumerate_terms(d, cfg.max_order.min(d), TermFilter::All)?
    } else {
        vec![TermIndex::new((0..d).collect())?]
    };
    let mut terms = BTreeMap::new();
    for idx in &term_indices {
        let dims: Vec<usize> = match cfg.variant {
            DecoderVariant::Linear => vec![idx.order(), p],
            _ => vec![idx.order(), cfg.hidden_units, p],
        };
        let mut net = DenseNet::mlp(&dims, cfg.activation, rng)?;
        // damp the output layer so terms start near zero: the intercept
        // carries the feature means and the integral residuals start small
        net.layers
            .last_mut()
            .unwrap()
            .weights
            .mapv_inplace(|w| 0.1 * w);
        terms.insert(idx.clone(), net);
    }

    // intercept at the feature means, noise at the feature scales
    let n = data.n_rows() as f64;
    let mut intercept = Array1::zeros(p);
    let mut noise_log_scale = Array1::zeros(p);
    for j in 0..p {
        let col = data.y.column(j);
        let mean = col.sum() / n;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        intercept[j] = mean;
        noise_log_scale[j] = var.sqrt().max(1e-3).ln();
    }
    let model = DecompositionModel::new(intercept, terms, noise_log_scale, meta)?;

    let encoder = EncoderState::new(
        p,
        dc,
        dz,
        cfg.encoder_hidden,
        cfg.activation,
        cfg.encoder_include_covariates,
        rng,
    )?;

    let masks = if cfg.masks && cfg.variant.decomposed() {
        Some(SparsityMasks::new(
            p,
            term_indices,
            cfg.mask_prior,
            cfg.mask_temperature,
        )?)
    } else {
        None
    };

    Ok((model, encoder, masks))
}

/// Full constrained training loop: minibatch ELBO gradients plus penalty
/// gradients, Adam on every trainable block, then a multiplier ascent step
/// from the same residuals (simultaneous descent-ascent).
pub fn fit(data: &Dataset, cfg: &TrainConfig) -> Result<FitResult> {
    data.validate()?;
    cfg.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let (model, encoder, masks) = build_model(data, cfg, &mut rng)?;

    let mut cs = ConstraintSet::for_model(
        &model,
        cfg.grid_size,
        cfg.method,
        cfg.schedule,
        cfg.eta,
        cfg.epsilon,
    )?;

    let adam = cfg.adam;
    let mut state = TrainState {
        term_adam: model
            .terms
            .iter()
            .map(|(t, net)| (t.clone(), AdamState::for_net(net, adam)))
            .collect(),
        intercept_adam: FlatAdamState::new(model.intercept.len(), adam),
        noise_adam: FlatAdamState::new(model.noise_log_scale.len(), adam),
        encoder_adam: AdamState::for_net(&encoder.net, adam),
        mask_adam: masks
            .as_ref()
            .map(|m| FlatAdamState::new(m.logits.len(), adam)),
        model,
        encoder,
        masks,
    };

    let n = data.n_rows();
    let batch = cfg.effective_batch(n);
    // gradients are per-datapoint means so the penalty scales (lambda, c)
    // stay comparable across sample sizes; logged values are full-data
    // equivalents
    let grad_scale = 1.0 / batch as f64;
    let log_scale = n as f64 / batch as f64;
    let constrained = cfg.variant.constrained();

    let mut log: Vec<LogRow> = Vec::new();
    let mut checkpoint = state.snapshot();
    let mut checkpoint_iter = 0usize;
    let mut diverged_at: Option<usize> = None;
    let mut indices: Vec<usize> = (0..n).collect();

    for iter in 0..cfg.iterations {
        let progress = iter as f64 / cfg.iterations.max(1) as f64;
        let lr_mult = if progress <= cfg.lr_decay_after || cfg.lr_decay_after >= 1.0 {
            1.0
        } else {
            let t = (progress - cfg.lr_decay_after) / (1.0 - cfg.lr_decay_after);
            cfg.lr_floor.powf(t)
        };
        let lr = cfg.adam.learning_rate * lr_mult;
        for a in state.term_adam.values_mut() {
            a.hyper.learning_rate = lr;
        }
        state.intercept_adam.hyper.learning_rate = lr;
        state.noise_adam.hyper.learning_rate = lr;
        state.encoder_adam.hyper.learning_rate = lr;
        if let Some(a) = state.mask_adam.as_mut() {
            a.hyper.learning_rate = lr;
        }

        // minibatch
        let (by, bc);
        if batch == n {
            by = data.y.view().to_owned();
            bc = data.covariates.view().to_owned();
        } else {
            for k in 0..batch {
                let j = rng.random_range(k..n);
                indices.swap(k, j);
            }
            let sel = &indices[..batch];
            by = ndarray::Array2::from_shape_fn((batch, data.n_features()), |(i, j)| {
                data.y[[sel[i], j]]
            });
            bc = ndarray::Array2::from_shape_fn((batch, data.n_covariates()), |(i, j)| {
                data.covariates[[sel[i], j]]
            });
        }

        // ELBO gradients, averaged over mc samples
        let mask_dim = state.masks.as_ref().map(|m| (m.logits.nrows(), m.n_terms()));
        let mut total = ElboParts {
            elbo: 0.0,
            reconstruction: 0.0,
            kl_z: 0.0,
            kl_masks: 0.0,
        };
        let mut grads: Option<ElboGrads> = None;
        let mut failed = false;
        for _ in 0..cfg.mc_samples {
            let draws = NoiseDraws::sample(batch, cfg.z_dim, mask_dim, &mut rng);
            match elbo(
                &state.model,
                &state.encoder,
                state.masks.as_ref(),
                &by.view(),
                &bc.view(),
                &draws,
            ) {
                Ok((parts, g)) => {
                    total.elbo += parts.elbo;
                    total.reconstruction += parts.reconstruction;
                    total.kl_z += parts.kl_z;
                    total.kl_masks += parts.kl_masks;
                    match &mut grads {
                        None => grads = Some(g),
                        Some(acc) => {
                            for (term, tape) in g.term_tapes {
                                acc.term_tapes
                                    .get_mut(&term)
                                    .expect("same term set")
                                    .add_scaled(&tape, 1.0)?;
                            }
                            acc.intercept += &g.intercept;
                            acc.noise_log_scale += &g.noise_log_scale;
                            acc.encoder.add_scaled(&g.encoder, 1.0)?;
                            if let (Some(a), Some(b)) =
                                (acc.mask_logits.as_mut(), g.mask_logits.as_ref())
                            {
                                *a += b;
                            }
                        }
                    }
                }
                Err(Error::Numeric(_)) => {
                    failed = true;
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        if failed {
            diverged_at = Some(iter);
            break;
        }
        let mut grads = grads.expect("mc_samples >= 1");
        let avg = 1.0 / cfg.mc_samples as f64;
        let elbo_scale = grad_scale * avg;
        for tape in grads.term_tapes.values_mut() {
            tape.scale(elbo_scale);
        }
        grads.intercept.mapv_inplace(|g| g * elbo_scale);
        grads.noise_log_scale.mapv_inplace(|g| g * elbo_scale);
        grads.encoder.scale(elbo_scale);
        if let Some(gm) = grads.mask_logits.as_mut() {
            gm.mapv_inplace(|g| g * elbo_scale);
        }
        let report_scale = log_scale * avg;
        total.elbo *= report_scale;
        total.reconstruction *= report_scale;
        total.kl_z *= report_scale;
        total.kl_masks *= report_scale;

        // constraint residuals and penalty gradients
        let mut max_residual = f64::NAN;
        let mut fields = None;
        let ramp_end = cfg.constraint_warmup + cfg.constraint_ramp;
        let fully_engaged = iter >= ramp_end;
        if constrained && iter >= cfg.constraint_warmup {
            let scheduled_c = cs.c_t;
            if !fully_engaged {
                let frac =
                    (iter - cfg.constraint_warmup + 1) as f64 / cfg.constraint_ramp.max(1) as f64;
                cs.c_t = scheduled_c * frac;
            }
            let (f, aug) = match cfg.mc_residual_draws {
                Some(m) => residuals_and_penalty_mc(
                    &state.model,
                    &cs,
                    m,
                    cfg.seed.wrapping_add(iter as u64),
                )?,
                None => residuals_and_penalty(&state.model, &cs)?,
            };
            cs.c_t = scheduled_c;
            max_residual = f.iter().map(|r| r.max_abs()).fold(0.0, f64::max);
            if !aug.value.is_finite() {
                diverged_at = Some(iter);
                break;
            }
            for (term, tape) in &aug.term_gradients {
                grads
                    .term_tapes
                    .get_mut(term)
                    .expect("constraints cover model terms")
                    .add_scaled(tape, 1.0)?;
            }
            fields = Some(f);
        }

        // descent step on every block
        let mut step_failed = false;
        for (term, net) in state.model.terms.iter_mut() {
            let tape = &grads.term_tapes[term];
            if state.term_adam.get_mut(term).unwrap().step(net, tape).is_err() {
                step_failed = true;
                break;
            }
        }
        if !step_failed {
            state.intercept_adam.step(
                state.model.intercept.iter_mut(),
                grads.intercept.iter().cloned(),
                "intercept",
            )?;
            state.noise_adam.step(
                state.model.noise_log_scale.iter_mut(),
                grads.noise_log_scale.iter().cloned(),
                "noise scales",
            )?;
            state
                .model
                .noise_log_scale
                .mapv_inplace(|v| v.clamp(-13.8, 13.8));
            state
                .encoder_adam
                .step(&mut state.encoder.net, &grads.encoder)?;
            if let (Some(m), Some(adam_m), Some(gm)) = (
                state.masks.as_mut(),
                state.mask_adam.as_mut(),
                grads.mask_logits.as_ref(),
            ) {
                adam_m.step(m.logits.iter_mut(), gm.iter().cloned(), "mask logits")?;
            }
        }
        if step_failed {
            diverged_at = Some(iter);
            break;
        }

        // multiplier ascent from the pre-step residuals
        if let Some(f) = fields.as_ref() {
            if fully_engaged && cs.method != ConstraintMethod::Penalty {
                multiplier_update(&mut cs, f)?;
            }
        }

        if iter % cfg.log_every == 0 || iter + 1 == cfg.iterations {
            log.push(LogRow {
                iteration: iter,
                elbo: total.elbo,
                reconstruction: total.reconstruction,
                kl_z: total.kl_z,
                kl_masks: total.kl_masks,
                max_residual,
                c_t: cs.c_t,
            });
            checkpoint = state.snapshot();
            checkpoint_iter = iter;
        }
    }

    if let Some(at) = diverged_at {
        let (model, encoder, masks) = checkpoint;
        state.model = model;
        state.encoder = encoder;
        state.masks = masks;
        let fields = residuals(&state.model, &cs, Estimator::Quadrature)?;
        let tolerance = check_tolerance(&cs, &fields, cfg.epsilon)?;
        let (mu, _) = state
            .encoder
            .encode(&data.y.view(), &data.covariates.view())?;
        return Ok(FitResult {
            model: state.model,
            encoder: state.encoder,
            masks: state.masks,
            constraints: cs,
            log,
            status: FitStatus::Diverged {
                at_iteration: at.max(checkpoint_iter),
            },
            tolerance,
            posterior_mean_z: mu,
        });
    }

    let fields = residuals(&state.model, &cs, Estimator::Quadrature)?;
    let tolerance = check_tolerance(&cs, &fields, cfg.epsilon)?;
    let status = if tolerance.pass {
        FitStatus::Converged
    } else {
        FitStatus::ToleranceFailed
    };
    let (mu, _) = state
        .encoder
        .encode(&data.y.view(), &data.covariates.view())?;
    Ok(FitResult {
        model: state.model,
        encoder: state.encoder,
        masks: state.masks,
        constraints: cs,
        log,
        status,
        tolerance,
        posterior_mean_z: mu,
    })
}
