//! Deterministic synthetic-data generators with ground-truth decompositions.
//!
//! Each generator keeps its closed-form feature functions as evaluable
//! product terms. Ground-truth variance fractions come from the exact
//! ANOVA split of those products under the generating input distribution
//! (each factor centered by its marginal mean), with variances estimated
//! by a seeded Monte Carlo oracle.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vi::{CovariateKind, Dataset};

/// Which synthetic experiment to generate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generator {
    /// Two features over a scalar latent and a scalar covariate.
    Fig1Toy,
    /// 25 features in five blocks of five over (z, c).
    Fig4Panel,
    /// 25 features over a 2-D latent and a binary batch label.
    Batch2d,
}

/// Generator id plus size, noise level and seed.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub generator: Generator,
    pub n: usize,
    pub sigma: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn new(generator: Generator, n: usize, sigma: f64, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::Argument("sample count must be > 0".into()));
        }
        if sigma < 0.0 {
            return Err(Error::Argument("noise sigma must be >= 0".into()));
        }
        Ok(SyntheticSpec {
            generator,
            n,
            sigma,
            seed,
        })
    }

    /// Paper-scale defaults: N = 500, sigma = 0.05.
    pub fn default_for(generator: Generator, seed: u64) -> Self {
        SyntheticSpec {
            generator,
            n: 500,
            sigma: 0.05,
            seed,
        }
    }
}

/// Marginal distribution of one generating input coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum InputDist {
    Uniform(f64, f64),
    /// Fair coin on {0, 1}.
    BernoulliHalf,
}

impl InputDist {
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            InputDist::Uniform(lo, hi) => rng.random_range(*lo..*hi),
            InputDist::BernoulliHalf => {
                if rng.random_range(0.0..1.0) < 0.5 {
                    0.0
                } else {
                    1.0
                }
            }
        }
    }
}

/// Scalar shapes used by the generators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum UnaryFn {
    Identity,
    Cos,
    Sin,
    Tanh,
    /// `tanh(a x)`
    TanhScaled(f64),
    /// `exp(-x^2)`
    GaussBump,
    /// `exp(-x^2 / 2)`
    GaussBumpHalf,
    /// `sin(x) * I(x > 0)`
    SinPositive,
}

impl UnaryFn {
    pub fn eval(&self, x: f64) -> f64 {
        match self {
            UnaryFn::Identity => x,
            UnaryFn::Cos => x.cos(),
            UnaryFn::Sin => x.sin(),
            UnaryFn::Tanh => x.tanh(),
            UnaryFn::TanhScaled(a) => (a * x).tanh(),
            UnaryFn::GaussBump => (-x * x).exp(),
            UnaryFn::GaussBumpHalf => (-0.5 * x * x).exp(),
            UnaryFn::SinPositive => {
                if x > 0.0 {
                    x.sin()
                } else {
                    0.0
                }
            }
        }
    }

    /// Marginal mean under `dist`, by composite Simpson for intervals.
    fn mean(&self, dist: &InputDist) -> f64 {
        match dist {
            InputDist::BernoulliHalf => 0.5 * (self.eval(0.0) + self.eval(1.0)),
            InputDist::Uniform(lo, hi) => {
                let m = 4000; // even panel count; x = 0 lands on a node
                let h = (hi - lo) / m as f64;
                let mut acc = self.eval(*lo) + self.eval(*hi);
                for k in 1..m {
                    let x = lo + h * k as f64;
                    acc += self.eval(x) * if k % 2 == 1 { 4.0 } else { 2.0 };
                }
                acc * h / 3.0 / (hi - lo)
            }
        }
    }
}

/// One multiplicative component of a generating feature:
/// `coeff * prod_k g_k(x_{coord_k})`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProductTerm {
    pub coeff: f64,
    pub factors: Vec<(usize, UnaryFn)>,
}

impl ProductTerm {
    fn new(coeff: f64, factors: Vec<(usize, UnaryFn)>) -> Self {
        ProductTerm { coeff, factors }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.coeff
            * self
                .factors
                .iter()
                .map(|(c, f)| f.eval(x[*c]))
                .product::<f64>()
    }
}

/// A product term with each factor centered by its marginal mean; the
/// building block of the exact ANOVA split.
#[derive(Debug, Clone)]
pub struct CenteredProduct {
    pub coeff: f64,
    /// `(coordinate, shape, mean to subtract)`
    pub factors: Vec<(usize, UnaryFn, f64)>,
}

impl CenteredProduct {
    pub fn eval(&self, x: &[f64]) -> f64 {
        self.coeff
            * self
                .factors
                .iter()
                .map(|(c, f, m)| f.eval(x[*c]) - m)
                .product::<f64>()
    }
}

/// Closed-form generating functions with their input distribution,
/// retained for scoring fitted decompositions.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub input_dists: Vec<InputDist>,
    pub coord_names: Vec<String>,
    /// Raw product terms per feature, exactly as generated.
    pub features: Vec<Vec<ProductTerm>>,
    pub sigma: f64,
}

impl GroundTruth {
    pub fn n_features(&self) -> usize {
        self.features.len()
    }

    /// Noise-free feature value at a generating input point.
    pub fn eval_feature(&self, feature: usize, x: &[f64]) -> f64 {
        self.features[feature].iter().map(|t| t.eval(x)).sum()
    }

    /// Exact ANOVA terms of one feature, grouped by coordinate subset.
    ///
    /// For independent inputs, a product `prod_k g_k` splits exactly into
    /// `sum_{T subseteq S} prod_{k in T} (g_k - m_k) * prod_{k notin T} m_k`,
    /// and the `T`-indexed piece belongs to the `T` ANOVA term.
    pub fn anova_terms(&self, feature: usize) -> BTreeMap<Vec<usize>, Vec<CenteredProduct>> {
        let mut out: BTreeMap<Vec<usize>, Vec<CenteredProduct>> = BTreeMap::new();
        for term in &self.features[feature] {
            let k = term.factors.len();
            let means: Vec<f64> = term
                .factors
                .iter()
                .map(|(c, f)| f.mean(&self.input_dists[*c]))
                .collect();
            for bits in 1..(1usize << k) {
                let mut coeff = term.coeff;
                let mut factors = Vec::new();
                let mut subset = Vec::new();
                for (fi, (c, f)) in term.factors.iter().enumerate() {
                    if bits & (1 << fi) != 0 {
                        factors.push((*c, *f, means[fi]));
                        subset.push(*c);
                    } else {
                        coeff *= means[fi];
                    }
                }
                if coeff == 0.0 {
                    continue;
                }
                subset.sort_unstable();
                out.entry(subset)
                    .or_default()
                    .push(CenteredProduct { coeff, factors });
            }
        }
        out
    }

    /// Monte Carlo oracle for the true variance fractions, over all
    /// coordinate subsets up to order `max_order`. Fractions are
    /// normalised by the summed term variances plus the noise variance.
    pub fn fractions(&self, max_order: usize, n_draws: usize, seed: u64) -> Result<FractionTable> {
        if n_draws < 2 {
            return Err(Error::Argument("oracle needs at least 2 draws".into()));
        }
        let d = self.input_dists.len();
        let subsets = crate::decomp::enumerate_terms(
            d,
            max_order.min(d),
            crate::decomp::TermFilter::All,
        )?;
        let subset_vecs: Vec<Vec<usize>> =
            subsets.iter().map(|t| t.coords().to_vec()).collect();
        let p = self.n_features();
        let t = subset_vecs.len();

        // ANOVA terms per (feature, subset slot)
        let mut slots: Vec<Vec<Vec<CenteredProduct>>> = vec![vec![Vec::new(); t]; p];
        for j in 0..p {
            for (subset, terms) in self.anova_terms(j) {
                match subset_vecs.iter().position(|s| *s == subset) {
                    Some(idx) => slots[j][idx] = terms,
                    None => {
                        return Err(Error::Argument(format!(
                            "feature {j} has a ground-truth term on subset {subset:?} \
                             beyond max_order {max_order}"
                        )))
                    }
                }
            }
        }

        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut sum = vec![vec![0.0_f64; t]; p];
        let mut sum_sq = vec![vec![0.0_f64; t]; p];
        let mut x = vec![0.0_f64; d];
        for _ in 0..n_draws {
            for (c, dist) in self.input_dists.iter().enumerate() {
                x[c] = dist.sample(&mut rng);
            }
            for j in 0..p {
                for ti in 0..t {
                    if slots[j][ti].is_empty() {
                        continue;
                    }
                    let v: f64 = slots[j][ti].iter().map(|cp| cp.eval(&x)).sum();
                    sum[j][ti] += v;
                    sum_sq[j][ti] += v * v;
                }
            }
        }

        let n = n_draws as f64;
        let noise_var = self.sigma * self.sigma;
        let mut variances = Array2::zeros((p, t));
        let mut fractions = Array2::zeros((p, t));
        let mut noise_fraction = Array1::zeros(p);
        for j in 0..p {
            let mut total = noise_var;
            for ti in 0..t {
                let mean = sum[j][ti] / n;
                let var = (sum_sq[j][ti] / n - mean * mean).max(0.0);
                variances[[j, ti]] = var;
                total += var;
            }
            if total > 0.0 {
                for ti in 0..t {
                    fractions[[j, ti]] = variances[[j, ti]] / total;
                }
                noise_fraction[j] = noise_var / total;
            }
        }
        let term_labels = subset_vecs
            .iter()
            .map(|s| {
                s.iter()
                    .map(|&c| self.coord_names[c].as_str())
                    .collect::<Vec<_>>()
                    .join(":")
            })
            .collect();
        Ok(FractionTable {
            term_labels,
            subsets: subset_vecs,
            variances,
            fractions,
            noise_fraction,
        })
    }
}

/// True variance fractions per feature and coordinate subset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FractionTable {
    pub term_labels: Vec<String>,
    pub subsets: Vec<Vec<usize>>,
    /// `[P x T]` term variances under the generating distribution.
    pub variances: Array2<f64>,
    /// `[P x T]` fractions; rows sum to one with the noise fraction.
    pub fractions: Array2<f64>,
    pub noise_fraction: Array1<f64>,
}

impl FractionTable {
    pub fn n_features(&self) -> usize {
        self.fractions.nrows()
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Dispatches on the spec's generator id.
pub fn generate(spec: &SyntheticSpec) -> Result<(Dataset, GroundTruth)> {
    match spec.generator {
        Generator::Fig1Toy => generate_fig1(spec),
        Generator::Fig4Panel => generate_fig4(spec),
        Generator::Batch2d => generate_batch2d(spec),
    }
}

fn sample_inputs(
    dists: &[InputDist],
    n: usize,
    rng: &mut ChaCha12Rng,
) -> Array2<f64> {
    let d = dists.len();
    let mut x = Array2::zeros((n, d));
    for i in 0..n {
        for (c, dist) in dists.iter().enumerate() {
            x[[i, c]] = dist.sample(rng);
        }
    }
    x
}

fn assemble(
    spec: &SyntheticSpec,
    truth: GroundTruth,
    latent_dims: usize,
) -> Result<(Dataset, GroundTruth)> {
    let mut rng = ChaCha12Rng::seed_from_u64(spec.seed);
    let inputs = sample_inputs(&truth.input_dists, spec.n, &mut rng);
    let p = truth.n_features();
    let mut y = Array2::zeros((spec.n, p));
    let normal = rand_distr::StandardNormal;
    for i in 0..spec.n {
        let row: Vec<f64> = inputs.row(i).to_vec();
        for j in 0..p {
            let noise: f64 = if spec.sigma > 0.0 {
                let e: f64 = <rand_distr::StandardNormal as rand_distr::Distribution<f64>>::sample(
                    &normal, &mut rng,
                );
                spec.sigma * e
            } else {
                0.0
            };
            y[[i, j]] = truth.eval_feature(j, &row) + noise;
        }
    }
    let d = truth.input_dists.len();
    let covariates = inputs
        .slice(ndarray::s![.., latent_dims..])
        .to_owned();
    let covariate_kinds = truth.input_dists[latent_dims..]
        .iter()
        .map(|dist| match dist {
            InputDist::BernoulliHalf => CovariateKind::Binary,
            InputDist::Uniform(..) => CovariateKind::Continuous,
        })
        .collect();
    let covariate_names = truth.coord_names[latent_dims..d].to_vec();
    let dataset = Dataset {
        y,
        covariates,
        covariate_kinds,
        feature_names: (1..=p).map(|j| format!("f{j}")).collect(),
        covariate_names,
    };
    Ok((dataset, truth))
}

/// Two-feature toy: `y1 = exp(-z^2) + 0.3 tanh(c)`,
/// `y2 = sin(z) + 0.2 c + 0.2 sin(z) c I(z > 0)`, with z, c ~ U(-2, 2).
pub fn generate_fig1(spec: &SyntheticSpec) -> Result<(Dataset, GroundTruth)> {
    if spec.generator != Generator::Fig1Toy {
        return Err(Error::Argument("spec generator must be fig1_toy".into()));
    }
    let truth = GroundTruth {
        input_dists: vec![InputDist::Uniform(-2.0, 2.0), InputDist::Uniform(-2.0, 2.0)],
        coord_names: vec!["z".into(), "c".into()],
        features: vec![
            vec![
                ProductTerm::new(1.0, vec![(0, UnaryFn::GaussBump)]),
                ProductTerm::new(0.3, vec![(1, UnaryFn::Tanh)]),
            ],
            vec![
                ProductTerm::new(1.0, vec![(0, UnaryFn::Sin)]),
                ProductTerm::new(0.2, vec![(1, UnaryFn::Identity)]),
                ProductTerm::new(
                    0.2,
                    vec![(0, UnaryFn::SinPositive), (1, UnaryFn::Identity)],
                ),
            ],
        ],
        sigma: spec.sigma,
    };
    assemble(spec, truth, 1)
}

/// 25 features over (z, c) ~ U(-2, 2)^2 in five blocks of five.
pub fn generate_fig4(spec: &SyntheticSpec) -> Result<(Dataset, GroundTruth)> {
    if spec.generator != Generator::Fig4Panel {
        return Err(Error::Argument("spec generator must be fig4_panel".into()));
    }
    let mut features = Vec::with_capacity(25);
    // block 1: w cos(z), w in {0.1 .. 0.5}
    for k in 1..=5 {
        let w = 0.1 * k as f64;
        features.push(vec![ProductTerm::new(w, vec![(0, UnaryFn::Cos)])]);
    }
    // block 2: 0.5 z + w c, w in {0.05 .. 0.25}
    for k in 1..=5 {
        let w = 0.05 * k as f64;
        features.push(vec![
            ProductTerm::new(0.5, vec![(0, UnaryFn::Identity)]),
            ProductTerm::new(w, vec![(1, UnaryFn::Identity)]),
        ]);
    }
    // block 3: w tanh(z) c, w in {0.01 .. 0.05}
    for k in 1..=5 {
        let w = 0.01 * k as f64;
        features.push(vec![ProductTerm::new(
            w,
            vec![(0, UnaryFn::Tanh), (1, UnaryFn::Identity)],
        )]);
    }
    // block 4: w c + 0.01 (0.12 - w) z tanh(c), w in {0.02 .. 0.1}
    for k in 1..=5 {
        let w = 0.02 * k as f64;
        features.push(vec![
            ProductTerm::new(w, vec![(1, UnaryFn::Identity)]),
            ProductTerm::new(
                0.01 * (0.12 - w),
                vec![(0, UnaryFn::Identity), (1, UnaryFn::Tanh)],
            ),
        ]);
    }
    // block 5: 0.1 tanh(z) + 0.2 tanh(c) + w sin(z) c, w in {0.2 .. 1.0}
    for k in 1..=5 {
        let w = 0.2 * k as f64;
        features.push(vec![
            ProductTerm::new(0.1, vec![(0, UnaryFn::Tanh)]),
            ProductTerm::new(0.2, vec![(1, UnaryFn::Tanh)]),
            ProductTerm::new(w, vec![(0, UnaryFn::Sin), (1, UnaryFn::Identity)]),
        ]);
    }
    let truth = GroundTruth {
        input_dists: vec![InputDist::Uniform(-2.0, 2.0), InputDist::Uniform(-2.0, 2.0)],
        coord_names: vec!["z".into(), "c".into()],
        features,
        sigma: spec.sigma,
    };
    assemble(spec, truth, 1)
}

/// 25 features over a 2-D latent and a fair binary batch label.
pub fn generate_batch2d(spec: &SyntheticSpec) -> Result<(Dataset, GroundTruth)> {
    if spec.generator != Generator::Batch2d {
        return Err(Error::Argument("spec generator must be batch2d".into()));
    }
    let mut features = Vec::with_capacity(25);
    // block 1: 0.3 w tanh(z1) + 0.2 w exp(-z2^2/2) + 0.3 w c, w in {1..5}
    for k in 1..=5 {
        let w = k as f64;
        features.push(vec![
            ProductTerm::new(0.3 * w, vec![(0, UnaryFn::Tanh)]),
            ProductTerm::new(0.2 * w, vec![(1, UnaryFn::GaussBumpHalf)]),
            ProductTerm::new(0.3 * w, vec![(2, UnaryFn::Identity)]),
        ]);
    }
    // block 2: 0.2 w tanh(z2) + 0.4 (6 - w) c, w in {1..5}
    for k in 1..=5 {
        let w = k as f64;
        features.push(vec![
            ProductTerm::new(0.2 * w, vec![(1, UnaryFn::Tanh)]),
            ProductTerm::new(0.4 * (6.0 - w), vec![(2, UnaryFn::Identity)]),
        ]);
    }
    // block 3: w z1 + (0.6 - w) z2 + (0.6 - w) tanh(z1) c, w in {0.1 .. 0.5}
    for k in 1..=5 {
        let w = 0.1 * k as f64;
        features.push(vec![
            ProductTerm::new(w, vec![(0, UnaryFn::Identity)]),
            ProductTerm::new(0.6 - w, vec![(1, UnaryFn::Identity)]),
            ProductTerm::new(
                0.6 - w,
                vec![(0, UnaryFn::Tanh), (2, UnaryFn::Identity)],
            ),
        ]);
    }
    // block 4: tanh(2 z1) + w tanh(z2), w in {0.2 .. 1.0} (batch-free)
    for k in 1..=5 {
        let w = 0.2 * k as f64;
        features.push(vec![
            ProductTerm::new(1.0, vec![(0, UnaryFn::TanhScaled(2.0))]),
            ProductTerm::new(w, vec![(1, UnaryFn::Tanh)]),
        ]);
    }
    // block 5: 0.1 c + w tanh(z1) c, w in {0.2 .. 1.0}
    for k in 1..=5 {
        let w = 0.2 * k as f64;
        features.push(vec![
            ProductTerm::new(0.1, vec![(2, UnaryFn::Identity)]),
            ProductTerm::new(w, vec![(0, UnaryFn::Tanh), (2, UnaryFn::Identity)]),
        ]);
    }
    let truth = GroundTruth {
        input_dists: vec![
            InputDist::Uniform(-2.0, 2.0),
            InputDist::Uniform(-2.0, 2.0),
            InputDist::BernoulliHalf,
        ],
        coord_names: vec!["z1".into(), "z2".into(), "c".into()],
        features,
        sigma: spec.sigma,
    };
    assemble(spec, truth, 2)
}
