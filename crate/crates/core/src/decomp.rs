//! The decomposable decoder: a family of term networks indexed by input
//! subsets, their summed forward pass, and the variance-decomposition
//! readout.
//!
//! The decoder input is the concatenation `x := (z, c)` of latent and
//! covariate coordinates; each term network sees only the columns named by
//! its [`TermIndex`]. Additivity is structural: `decode` is an exact sum
//! of term outputs plus the intercept.

use std::collections::BTreeMap;
use std::fmt;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::DenseNet;

/// A sorted, non-empty subset of input coordinates.
///
/// Ordering is by (order, coordinates) so main effects enumerate before
/// pairwise interactions, matching the deterministic term order used in
/// reports.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TermIndex(Vec<usize>);

impl TermIndex {
    pub fn new(coords: Vec<usize>) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::Argument("term index must be non-empty".into()));
        }
        if coords.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Argument(format!(
                "term coordinates must be strictly increasing, got {coords:?}"
            )));
        }
        Ok(TermIndex(coords))
    }

    pub fn coords(&self) -> &[usize] {
        &self.0
    }

    /// Number of coordinates the term depends on.
    pub fn order(&self) -> usize {
        self.0.len()
    }

    pub fn contains(&self, coord: usize) -> bool {
        self.0.binary_search(&coord).is_ok()
    }

    pub fn is_disjoint(&self, other: &TermIndex) -> bool {
        self.0.iter().all(|c| !other.contains(*c))
    }

    pub fn is_subset_of(&self, other: &TermIndex) -> bool {
        self.0.iter().all(|c| other.contains(*c))
    }

    /// Human-readable label built from coordinate names, e.g. `z:c`.
    pub fn label(&self, meta: &InputMeta) -> String {
        self.0
            .iter()
            .map(|&c| meta.names[c].as_str())
            .collect::<Vec<_>>()
            .join(":")
    }
}

impl PartialOrd for TermIndex {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for TermIndex {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.0.len(), &self.0).cmp(&(other.0.len(), &other.0))
    }
}

impl fmt::Display for TermIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|c| c.to_string()).collect();
        write!(f, "{{{}}}", parts.join(","))
    }
}

/// What a decoder input coordinate is, which fixes how it is integrated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CoordKind {
    /// Continuous latent coordinate; integrated over a fixed interval.
    Latent,
    /// Continuous observed covariate; integrated over its empirical range.
    Covariate,
    /// Binary covariate with levels {0, 1}; "integration" is the unweighted
    /// mean over the two levels.
    BinaryCovariate,
}

/// Per-coordinate metadata for the concatenated decoder input.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InputMeta {
    pub kinds: Vec<CoordKind>,
    /// Integration domain `[lo, hi]` per coordinate; binary coordinates
    /// carry `(0.0, 1.0)` and are treated as a level set.
    pub domains: Vec<(f64, f64)>,
    pub names: Vec<String>,
}

impl InputMeta {
    pub fn new(kinds: Vec<CoordKind>, domains: Vec<(f64, f64)>, names: Vec<String>) -> Result<Self> {
        if kinds.len() != domains.len() || kinds.len() != names.len() {
            return Err(Error::shape(
                "input metadata",
                format!("{} coordinates", kinds.len()),
                format!("{} domains, {} names", domains.len(), names.len()),
            ));
        }
        for (k, (kind, &(lo, hi))) in kinds.iter().zip(&domains).enumerate() {
            match kind {
                CoordKind::BinaryCovariate => {}
                _ => {
                    if !(lo < hi) {
                        return Err(Error::Argument(format!(
                            "coordinate {k}: domain must satisfy lo < hi, got [{lo}, {hi}]"
                        )));
                    }
                }
            }
        }
        Ok(InputMeta {
            kinds,
            domains,
            names,
        })
    }

    pub fn dim(&self) -> usize {
        self.kinds.len()
    }
}

/// Per-(feature, term) multipliers in `[0, 1]` applied during decoding.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TermMasks {
    #[serde(with = "term_map")]
    values: BTreeMap<TermIndex, Array1<f64>>,
}

impl TermMasks {
    pub fn new(values: BTreeMap<TermIndex, Array1<f64>>) -> Result<Self> {
        for (term, v) in &values {
            if v.iter().any(|&m| !(0.0..=1.0).contains(&m)) {
                return Err(Error::Argument(format!(
                    "mask values for term {term} must lie in [0, 1]"
                )));
            }
        }
        Ok(TermMasks { values })
    }

    pub fn get(&self, term: &TermIndex) -> Option<&Array1<f64>> {
        self.values.get(term)
    }

    pub fn terms(&self) -> impl Iterator<Item = &TermIndex> {
        self.values.keys()
    }
}

/// Extracts the named columns of `x` into a dense `[N x |coords|]` block.
pub fn gather_columns(x: &ArrayView2<f64>, coords: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((x.nrows(), coords.len()));
    for (j, &c) in coords.iter().enumerate() {
        out.column_mut(j).assign(&x.column(c));
    }
    out
}

/// Serializes term-keyed maps as pair lists, since JSON keys must be
/// strings.
mod term_map {
    use super::TermIndex;
    use serde::de::{Deserialize, Deserializer};
    use serde::ser::Serializer;
    use serde::Serialize;
    use std::collections::BTreeMap;

    pub fn serialize<S, V>(map: &BTreeMap<TermIndex, V>, ser: S) -> Result<S::Ok, S::Error>
    where
        S: Serializer,
        V: Serialize,
    {
        ser.collect_seq(map.iter())
    }

    pub fn deserialize<'de, D, V>(de: D) -> Result<BTreeMap<TermIndex, V>, D::Error>
    where
        D: Deserializer<'de>,
        V: Deserialize<'de>,
    {
        let pairs: Vec<(TermIndex, V)> = Vec::deserialize(de)?;
        Ok(pairs.into_iter().collect())
    }
}

/// The full decomposable decoder.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecompositionModel {
    /// Per-feature intercept, length `P`.
    pub intercept: Array1<f64>,
    /// Term networks keyed by input subset; every net maps
    /// `[N x |subset|]` to `[N x P]`.
    #[serde(with = "term_map")]
    pub terms: BTreeMap<TermIndex, DenseNet>,
    /// Per-feature observation noise, stored as `ln(sigma_j)`.
    pub noise_log_scale: Array1<f64>,
    pub meta: InputMeta,
}

impl DecompositionModel {
    pub fn new(
        intercept: Array1<f64>,
        terms: BTreeMap<TermIndex, DenseNet>,
        noise_log_scale: Array1<f64>,
        meta: InputMeta,
    ) -> Result<Self> {
        let p = intercept.len();
        if noise_log_scale.len() != p {
            return Err(Error::shape(
                "noise scales",
                format!("{p}"),
                format!("{}", noise_log_scale.len()),
            ));
        }
        let d = meta.dim();
        for (term, net) in &terms {
            if term.coords().iter().any(|&c| c >= d) {
                return Err(Error::Argument(format!(
                    "term {term} references coordinates beyond input dimension {d}"
                )));
            }
            if net.input_dim() != term.order() {
                return Err(Error::shape(
                    format!("term {term} network input"),
                    format!("{}", term.order()),
                    format!("{}", net.input_dim()),
                ));
            }
            if net.output_dim() != p {
                return Err(Error::shape(
                    format!("term {term} network output"),
                    format!("{p}"),
                    format!("{}", net.output_dim()),
                ));
            }
        }
        Ok(DecompositionModel {
            intercept,
            terms,
            noise_log_scale,
            meta,
        })
    }

    pub fn n_features(&self) -> usize {
        self.intercept.len()
    }

    pub fn input_dim(&self) -> usize {
        self.meta.dim()
    }

    /// Per-feature observation noise variance `sigma_j^2`.
    pub fn noise_variance(&self) -> Array1<f64> {
        self.noise_log_scale.mapv(|s| (2.0 * s).exp())
    }

    /// Sum of masked term outputs plus the intercept:
    /// `out[i, j] = f0[j] + sum_T mask[j, T] * f_T(x[i, T])[j]`.
    ///
    /// Terms absent from `masks` are applied unmasked; mask entries whose
    /// term is not in the model are a key error.
    pub fn decode(&self, x: &ArrayView2<f64>, masks: Option<&TermMasks>) -> Result<Array2<f64>> {
        if x.ncols() != self.input_dim() {
            return Err(Error::shape(
                "decode input",
                format!("{} columns", self.input_dim()),
                format!("{}", x.ncols()),
            ));
        }
        if let Some(m) = masks {
            for term in m.terms() {
                if !self.terms.contains_key(term) {
                    return Err(Error::Key(format!("mask references unknown term {term}")));
                }
            }
        }
        let n = x.nrows();
        let p = self.n_features();
        let mut out = Array2::zeros((n, p));
        out += &self.intercept;
        for (term, net) in &self.terms {
            let sub = gather_columns(x, term.coords());
            let mut y = net.forward(&sub.view())?;
            if let Some(mask) = masks.and_then(|m| m.get(term)) {
                y *= &mask.view().insert_axis(Axis(0));
            }
            out += &y;
        }
        Ok(out)
    }

    /// Empirical per-feature variance decomposition over `reference` inputs.
    ///
    /// The reference sample defines the measure: by default callers pass the
    /// encoded training inputs (posterior means for latent coordinates,
    /// observed covariates for the rest). Variances are population
    /// variances over the reference rows.
    pub fn term_variances(
        &self,
        masks: Option<&TermMasks>,
        reference: &ArrayView2<f64>,
    ) -> Result<VarianceReport> {
        if reference.nrows() < 2 {
            return Err(Error::Argument(
                "variance decomposition needs at least 2 reference points".into(),
            ));
        }
        let p = self.n_features();
        let t = self.terms.len();
        let mut term_variances = Array2::zeros((p, t));
        let mut term_labels = Vec::with_capacity(t);
        for (ti, (term, net)) in self.terms.iter().enumerate() {
            let sub = gather_columns(reference, term.coords());
            let mut y = net.forward(&sub.view())?;
            if let Some(mask) = masks.and_then(|m| m.get(term)) {
                y *= &mask.view().insert_axis(Axis(0));
            }
            for j in 0..p {
                term_variances[[j, ti]] = population_variance(&y.column(j).to_vec());
            }
            term_labels.push(term.label(&self.meta));
        }
        let decoded = self.decode(reference, masks)?;
        let mut total_variance = Array1::zeros(p);
        for j in 0..p {
            total_variance[j] = population_variance(&decoded.column(j).to_vec());
        }
        let noise_variance = self.noise_variance();

        let mut fractions = Array2::zeros((p, t));
        let mut noise_fraction = Array1::zeros(p);
        let mut residual = Array1::zeros(p);
        for j in 0..p {
            let denom = total_variance[j] + noise_variance[j];
            let sum_terms: f64 = term_variances.row(j).sum();
            residual[j] = (total_variance[j] - sum_terms).abs();
            if denom > 0.0 {
                for ti in 0..t {
                    fractions[[j, ti]] = term_variances[[j, ti]] / denom;
                }
                noise_fraction[j] = noise_variance[j] / denom;
            }
        }
        Ok(VarianceReport {
            feature_names: (0..p).map(|j| format!("f{}", j + 1)).collect(),
            term_labels,
            term_variances,
            noise_variance,
            total_variance,
            fractions,
            noise_fraction,
            residual,
        })
    }
}

fn population_variance(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
}

/// Restricts which interactions `enumerate_terms` emits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TermFilter {
    /// Every subset up to the maximum order.
    All,
    /// Main effects plus only those interactions containing the given
    /// coordinate (e.g. latent-by-covariate pairs only).
    InteractionsContain(usize),
}

/// All coordinate subsets of `{0..d-1}` with `1 <= |subset| <= max_order`,
/// in deterministic (order, lexicographic) order.
pub fn enumerate_terms(d: usize, max_order: usize, filter: TermFilter) -> Result<Vec<TermIndex>> {
    if max_order < 1 || max_order > d {
        return Err(Error::Argument(format!(
            "max_order must lie in 1..={d}, got {max_order}"
        )));
    }
    let mut out = Vec::new();
    for size in 1..=max_order {
        let mut combo: Vec<usize> = (0..size).collect();
        loop {
            let keep = match filter {
                TermFilter::All => true,
                TermFilter::InteractionsContain(c) => size == 1 || combo.contains(&c),
            };
            if keep {
                out.push(TermIndex::new(combo.clone())?);
            }
            // advance to the next combination of `size` out of `d`
            let mut i = size;
            loop {
                if i == 0 {
                    break;
                }
                i -= 1;
                if combo[i] != i + d - size {
                    combo[i] += 1;
                    for j in i + 1..size {
                        combo[j] = combo[j - 1] + 1;
                    }
                    break;
                }
                if i == 0 {
                    combo.clear();
                    break;
                }
            }
            if combo.is_empty() {
                break;
            }
        }
    }
    Ok(out)
}

/// Builds a higher-order network that reproduces `net` exactly: first-layer
/// weights on coordinates outside `from` are zeroed, so the new network is
/// constant in them. This is the constructive witness that, without
/// constraints, an interaction subspace strictly contains each of its
/// marginal subspaces.
pub fn embed_term(net: &DenseNet, from: &TermIndex, to: &TermIndex) -> Result<DenseNet> {
    if !from.is_subset_of(to) {
        return Err(Error::Argument(format!(
            "cannot embed term {from} into non-superset {to}"
        )));
    }
    if net.input_dim() != from.order() {
        return Err(Error::shape(
            "embed_term source network",
            format!("{} inputs", from.order()),
            format!("{}", net.input_dim()),
        ));
    }
    let mut layers = net.layers.clone();
    let first = &mut layers[0];
    let h = first.weights.nrows();
    let mut widened = Array2::zeros((h, to.order()));
    for (src_col, coord) in from.coords().iter().enumerate() {
        let dst_col = to
            .coords()
            .iter()
            .position(|c| c == coord)
            .expect("subset checked above");
        widened
            .column_mut(dst_col)
            .assign(&first.weights.column(src_col));
    }
    first.weights = widened;
    DenseNet::new(layers)
}

/// Per-feature variance attributed to each term, plus noise and the
/// cross-term residual. Fractions are normalised by
/// `Var(decoded output) + sigma_j^2`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VarianceReport {
    pub feature_names: Vec<String>,
    pub term_labels: Vec<String>,
    /// `[P x T]` raw variance of each masked term over the reference inputs.
    pub term_variances: Array2<f64>,
    pub noise_variance: Array1<f64>,
    /// Empirical variance of the full decoded output, per feature.
    pub total_variance: Array1<f64>,
    /// `[P x T]` fraction of total variance per term.
    pub fractions: Array2<f64>,
    pub noise_fraction: Array1<f64>,
    /// `|Var(total) - sum Var(terms)|` per feature; reported, never dropped.
    pub residual: Array1<f64>,
}

impl VarianceReport {
    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    /// CSV with one row per feature: fraction per term, noise fraction,
    /// then the absolute cross-term residual.
    pub fn to_csv_string(&self) -> String {
        let mut s = String::from("feature");
        for label in &self.term_labels {
            s.push(',');
            s.push_str(label);
        }
        s.push_str(",noise,residual\n");
        for (j, name) in self.feature_names.iter().enumerate() {
            s.push_str(name);
            for ti in 0..self.term_labels.len() {
                s.push(',');
                s.push_str(&format!("{}", self.fractions[[j, ti]]));
            }
            s.push_str(&format!(
                ",{},{}\n",
                self.noise_fraction[j], self.residual[j]
            ));
        }
        s
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, DenseLayer};
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn zc_meta() -> InputMeta {
        InputMeta::new(
            vec![CoordKind::Latent, CoordKind::Covariate],
            vec![(-3.0, 3.0), (-2.0, 2.0)],
            vec!["z".into(), "c".into()],
        )
        .unwrap()
    }

    fn linear_term(w: &[f64], p: usize) -> DenseNet {
        // one-layer identity net mapping each input through weight w.
        let d = w.len();
        let mut weights = Array2::zeros((p, d));
        for j in 0..p {
            for (i, &wi) in w.iter().enumerate() {
                weights[[j, i]] = wi;
            }
        }
        DenseNet::new(vec![
            DenseLayer::new(weights, Array1::zeros(p), Activation::Identity).unwrap(),
        ])
        .unwrap()
    }

    fn two_term_model() -> DecompositionModel {
        let mut terms = BTreeMap::new();
        terms.insert(TermIndex::new(vec![0]).unwrap(), linear_term(&[2.0], 1));
        terms.insert(TermIndex::new(vec![1]).unwrap(), linear_term(&[1.0], 1));
        DecompositionModel::new(array![1.0], terms, array![0.0], zc_meta()).unwrap()
    }

    #[test]
    fn all_masks_zero_returns_intercept() {
        let model = two_term_model();
        let mut masks = BTreeMap::new();
        for term in model.terms.keys() {
            masks.insert(term.clone(), array![0.0]);
        }
        let masks = TermMasks::new(masks).unwrap();
        let out = model
            .decode(&array![[0.4, -1.7], [2.0, 0.0]].view(), Some(&masks))
            .unwrap();
        assert_eq!(out, array![[1.0], [1.0]]);
    }

    #[test]
    fn single_linear_term_arithmetic() {
        // f0 = 1, f_z(z) = 2 z, z = 3, mask = 1 -> 7.
        let mut terms = BTreeMap::new();
        terms.insert(TermIndex::new(vec![0]).unwrap(), linear_term(&[2.0], 1));
        let model =
            DecompositionModel::new(array![1.0], terms, array![0.0], zc_meta()).unwrap();
        let out = model.decode(&array![[3.0, 0.0]].view(), None).unwrap();
        assert_abs_diff_eq!(out[[0, 0]], 7.0);
    }

    #[test]
    fn unknown_mask_term_is_key_error() {
        let model = two_term_model();
        let mut masks = BTreeMap::new();
        masks.insert(TermIndex::new(vec![0, 1]).unwrap(), array![1.0]);
        let masks = TermMasks::new(masks).unwrap();
        let err = model
            .decode(&array![[0.0, 0.0]].view(), Some(&masks))
            .unwrap_err();
        assert!(matches!(err, Error::Key(_)));
    }

    #[test]
    fn enumerate_terms_d2() {
        let terms = enumerate_terms(2, 2, TermFilter::All).unwrap();
        let expect = vec![
            TermIndex::new(vec![0]).unwrap(),
            TermIndex::new(vec![1]).unwrap(),
            TermIndex::new(vec![0, 1]).unwrap(),
        ];
        assert_eq!(terms, expect);
    }

    #[test]
    fn enumerate_terms_pairing_filter() {
        // Main effects plus only pairs containing coordinate 0: 9 terms.
        let terms = enumerate_terms(5, 2, TermFilter::InteractionsContain(0)).unwrap();
        assert_eq!(terms.len(), 9);
        for t in &terms {
            assert!(t.order() == 1 || t.contains(0));
        }
    }

    #[test]
    fn enumerate_terms_full_order_three() {
        // Brute force: 2^3 - 1 = 7 non-empty subsets.
        let terms = enumerate_terms(3, 3, TermFilter::All).unwrap();
        assert_eq!(terms.len(), 7);
    }

    #[test]
    fn enumerate_terms_rejects_bad_order() {
        assert!(enumerate_terms(3, 0, TermFilter::All).is_err());
        assert!(enumerate_terms(3, 4, TermFilter::All).is_err());
    }

    #[test]
    fn variance_all_in_single_nonzero_term() {
        let mut terms = BTreeMap::new();
        terms.insert(TermIndex::new(vec![0]).unwrap(), linear_term(&[1.0], 1));
        terms.insert(TermIndex::new(vec![1]).unwrap(), linear_term(&[0.0], 1));
        let model = DecompositionModel::new(
            array![0.0],
            terms,
            array![-20.0], // sigma ~ 2e-9, noise fraction ~ 0
            zc_meta(),
        )
        .unwrap();
        let reference = array![[-1.0, 0.3], [0.0, -0.5], [1.0, 0.9], [2.0, 0.1]];
        let report = model.term_variances(None, &reference.view()).unwrap();
        assert!(report.fractions[[0, 0]] > 0.999999);
        assert!(report.fractions[[0, 1]].abs() < 1e-12);
    }

    #[test]
    fn variance_needs_two_points() {
        let model = two_term_model();
        let err = model
            .term_variances(None, &array![[0.0, 0.0]].view())
            .unwrap_err();
        assert!(matches!(err, Error::Argument(_)));
    }

    #[test]
    fn uniform_linear_variance_oracle() {
        // f_z(z) = z, f_c(c) = c with z, c ~ U(-2, 2): Var = 4/3 each,
        // fractions 0.5 / 0.5 up to Monte Carlo error at 1e5 samples.
        let mut terms = BTreeMap::new();
        terms.insert(TermIndex::new(vec![0]).unwrap(), linear_term(&[1.0], 1));
        terms.insert(TermIndex::new(vec![1]).unwrap(), linear_term(&[1.0], 1));
        let model =
            DecompositionModel::new(array![0.0], terms, array![-20.0], zc_meta()).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let reference =
            Array2::from_shape_fn((100_000, 2), |_| rng.random_range(-2.0..2.0));
        let report = model.term_variances(None, &reference.view()).unwrap();
        let four_thirds = 4.0 / 3.0;
        for ti in 0..2 {
            assert!(
                (report.term_variances[[0, ti]] - four_thirds).abs() / four_thirds < 0.02,
                "term {ti} variance {}",
                report.term_variances[[0, ti]]
            );
            assert!((report.fractions[[0, ti]] - 0.5).abs() < 0.02);
        }
    }

    #[test]
    fn embed_term_witness_agrees_to_machine_precision() {
        // Proposition-1 construction: an interaction net with zeroed
        // covariate weights reproduces the marginal net exactly.
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let f_z = DenseNet::mlp(&[1, 64, 3], Activation::Softplus, &mut rng).unwrap();
        let from = TermIndex::new(vec![0]).unwrap();
        let to = TermIndex::new(vec![0, 1]).unwrap();
        let f_zc = embed_term(&f_z, &from, &to).unwrap();
        let x = Array2::from_shape_fn((50, 2), |_| rng.random_range(-3.0..3.0));
        let marginal = f_z
            .forward(&gather_columns(&x.view(), &[0]).view())
            .unwrap();
        let joint = f_zc.forward(&x.view()).unwrap();
        let max_diff = (&joint - &marginal)
            .iter()
            .fold(0.0_f64, |m, &d| m.max(d.abs()));
        assert!(max_diff < 1e-12, "max diff {max_diff}");
    }

    proptest! {
        /// Structural additivity: decoding the full model equals the
        /// intercept plus the single-term decodes, up to float associativity.
        #[test]
        fn decode_is_structurally_additive(
            z in -3.0f64..3.0,
            c in -2.0f64..2.0,
            seed in 0u64..1_000,
        ) {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let mut terms = BTreeMap::new();
            for idx in enumerate_terms(2, 2, TermFilter::All).unwrap() {
                let net = DenseNet::mlp(
                    &[idx.order(), 8, 2],
                    Activation::Tanh,
                    &mut rng,
                ).unwrap();
                terms.insert(idx, net);
            }
            let model = DecompositionModel::new(
                array![0.3, -0.7],
                terms,
                array![0.0, 0.0],
                zc_meta(),
            ).unwrap();
            let x = array![[z, c]];
            let full = model.decode(&x.view(), None).unwrap();

            let mut assembled = model.intercept.clone().insert_axis(Axis(0));
            for (term, net) in &model.terms {
                let sub = gather_columns(&x.view(), term.coords());
                assembled = assembled + net.forward(&sub.view()).unwrap();
            }
            for (a, b) in full.iter().zip(assembled.iter()) {
                let scale = a.abs().max(b.abs()).max(1.0);
                prop_assert!((a - b).abs() / scale < 1e-12);
            }
        }
    }
}
