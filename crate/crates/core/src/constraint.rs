//! Integral-constraint residuals and differential-multiplier state.
//!
//! Each term network must integrate to zero over every one of its own
//! coordinates, for every value of the remaining coordinates. Residuals are
//! estimated by trapezoid quadrature (or Monte Carlo draws along the
//! integrated coordinate), and constraint pressure is applied through a
//! fixed quadratic penalty, gradient-ascent Lagrange multipliers, or both.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::decomp::{CoordKind, DecompositionModel, TermIndex};
use crate::error::{Error, Result};
use crate::nn::GradientTape;

/// Nodes and integration weights along one input coordinate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoordGrid {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
    /// True when the coordinate is a binary level set rather than an
    /// interval; its "integral" is the unweighted mean over the two levels.
    pub binary: bool,
}

impl CoordGrid {
    /// Trapezoid weights for arbitrary strictly increasing nodes; exact for
    /// affine integrands on any grid.
    pub fn from_nodes(nodes: Vec<f64>) -> Result<Self> {
        if nodes.len() < 2 {
            return Err(Error::Argument("a grid needs at least 2 nodes".into()));
        }
        if nodes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Argument("grid nodes must be strictly increasing".into()));
        }
        let g = nodes.len();
        let mut weights = vec![0.0; g];
        for k in 0..g - 1 {
            let h = nodes[k + 1] - nodes[k];
            weights[k] += 0.5 * h;
            weights[k + 1] += 0.5 * h;
        }
        Ok(CoordGrid {
            nodes,
            weights,
            binary: false,
        })
    }

    /// Equispaced trapezoid grid on `[lo, hi]`.
    pub fn continuous(lo: f64, hi: f64, g: usize) -> Result<Self> {
        if !(lo < hi) {
            return Err(Error::Argument(format!("need lo < hi, got [{lo}, {hi}]")));
        }
        if g < 2 {
            return Err(Error::Argument("grid size must be >= 2".into()));
        }
        let h = (hi - lo) / (g - 1) as f64;
        Self::from_nodes((0..g).map(|k| lo + h * k as f64).collect())
    }

    /// The two binary levels with weight 1/2 each.
    pub fn binary_levels() -> Self {
        CoordGrid {
            nodes: vec![0.0, 1.0],
            weights: vec![0.5, 0.5],
            binary: true,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Domain span; for binary grids the weights already sum to one.
    pub fn volume(&self) -> f64 {
        self.weights.iter().sum()
    }
}

/// Weighted sum of sampled values over one coordinate grid.
pub fn trapezoid_integral(values: &[f64], grid: &CoordGrid) -> Result<f64> {
    if values.len() != grid.len() {
        return Err(Error::shape(
            "trapezoid integral",
            format!("{} values", grid.len()),
            format!("{}", values.len()),
        ));
    }
    Ok(values
        .iter()
        .zip(&grid.weights)
        .map(|(v, w)| v * w)
        .sum())
}

/// One grid per input coordinate of the decoder.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuadratureGrid {
    pub coords: Vec<CoordGrid>,
}

impl QuadratureGrid {
    /// Builds per-coordinate grids from the model's input metadata:
    /// `g` trapezoid nodes over each continuous domain, the two levels for
    /// binary covariates.
    pub fn for_model(model: &DecompositionModel, g: usize) -> Result<Self> {
        let mut coords = Vec::with_capacity(model.meta.dim());
        for (kind, &(lo, hi)) in model.meta.kinds.iter().zip(&model.meta.domains) {
            coords.push(match kind {
                CoordKind::BinaryCovariate => CoordGrid::binary_levels(),
                _ => CoordGrid::continuous(lo, hi, g)?,
            });
        }
        Ok(QuadratureGrid { coords })
    }
}

/// How residual integrals are estimated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Estimator {
    /// Trapezoid quadrature on the fixed grid.
    Quadrature,
    /// Uniform draws along the integrated coordinate, `draws` per
    /// conditioning point, deterministically seeded. Conditioning
    /// coordinates stay on the quadrature grid so multiplier fields keep
    /// their indexing.
    MonteCarlo { draws: usize, seed: u64 },
}

/// Constraint-pressure scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintMethod {
    /// Fixed quadratic penalty only.
    Penalty,
    /// Multiplier term only, with gradient ascent on the multipliers.
    Bdmm,
    /// Multiplier term plus quadratic penalty.
    Mdmm,
}

impl ConstraintMethod {
    fn uses_lambda(self) -> bool {
        !matches!(self, ConstraintMethod::Penalty)
    }

    fn uses_quadratic(self) -> bool {
        !matches!(self, ConstraintMethod::Bdmm)
    }
}

/// Growth schedule for the penalty coefficient.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PenaltySchedule {
    pub c0: f64,
    /// Multiplicative growth factor applied every `every` multiplier updates.
    pub growth: f64,
    pub every: usize,
    pub c_max: f64,
}

impl Default for PenaltySchedule {
    fn default() -> Self {
        PenaltySchedule {
            c0: 5.0,
            growth: 1.01,
            every: 100,
            c_max: 1e4,
        }
    }
}

/// One integral constraint: the `integrate_coord` of `term` must integrate
/// to zero for every combination of the term's other coordinates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Constraint {
    pub term: TermIndex,
    pub integrate_coord: usize,
}

impl Constraint {
    /// Conditioning coordinates: the term's coordinates minus the
    /// integrated one, in ascending order.
    pub fn cond_coords(&self) -> Vec<usize> {
        self.term
            .coords()
            .iter()
            .copied()
            .filter(|&c| c != self.integrate_coord)
            .collect()
    }

    pub fn label(&self) -> String {
        format!("{}|dx{}", self.term, self.integrate_coord)
    }
}

/// Residual values of one constraint over (conditioning grid x features).
#[derive(Debug, Clone)]
pub struct ResidualField {
    pub constraint_index: usize,
    /// `[n_cond x P]`; `n_cond = 1` for main effects.
    pub values: Array2<f64>,
}

impl ResidualField {
    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0_f64, |m, &v| m.max(v.abs()))
    }
}

/// All constraints for a model plus multiplier and penalty state.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConstraintSet {
    pub constraints: Vec<Constraint>,
    /// One multiplier field per constraint, shaped `[n_cond x P]`,
    /// discretised on the conditioning quadrature grid.
    pub multipliers: Vec<Array2<f64>>,
    pub grid: QuadratureGrid,
    pub method: ConstraintMethod,
    /// Current penalty coefficient.
    pub c_t: f64,
    pub schedule: PenaltySchedule,
    /// Multiplier learning rate.
    pub eta: f64,
    /// Tolerance for declaring the constraints fulfilled.
    pub epsilon: f64,
    update_count: usize,
}

impl ConstraintSet {
    /// One constraint per (term, coordinate in term), in deterministic
    /// term-then-coordinate order. Multipliers start at zero and `c_t`
    /// at the schedule's `c0`.
    pub fn for_model(
        model: &DecompositionModel,
        grid_size: usize,
        method: ConstraintMethod,
        schedule: PenaltySchedule,
        eta: f64,
        epsilon: f64,
    ) -> Result<Self> {
        if epsilon <= 0.0 {
            return Err(Error::Argument("tolerance epsilon must be > 0".into()));
        }
        let grid = QuadratureGrid::for_model(model, grid_size)?;
        let p = model.n_features();
        let mut constraints = Vec::new();
        let mut multipliers = Vec::new();
        for term in model.terms.keys() {
            for &coord in term.coords() {
                let c = Constraint {
                    term: term.clone(),
                    integrate_coord: coord,
                };
                let n_cond: usize = c
                    .cond_coords()
                    .iter()
                    .map(|&cc| grid.coords[cc].len())
                    .product();
                multipliers.push(Array2::zeros((n_cond, p)));
                constraints.push(c);
            }
        }
        Ok(ConstraintSet {
            constraints,
            multipliers,
            grid,
            method,
            c_t: schedule.c0,
            schedule,
            eta,
            epsilon,
            update_count: 0,
        })
    }

    pub fn n_constraints(&self) -> usize {
        self.constraints.len()
    }
}

/// Flattened product grid over a term's coordinates.
struct TermGrid {
    /// `[M x order]` node coordinates, C-order over the per-axis grids.
    points: Array2<f64>,
    /// Grid size per axis.
    sizes: Vec<usize>,
    /// Integration weight per axis and node.
    weights: Vec<Vec<f64>>,
}

fn term_grid(grid: &QuadratureGrid, term: &TermIndex) -> TermGrid {
    let sizes: Vec<usize> = term
        .coords()
        .iter()
        .map(|&c| grid.coords[c].len())
        .collect();
    let weights: Vec<Vec<f64>> = term
        .coords()
        .iter()
        .map(|&c| grid.coords[c].weights.clone())
        .collect();
    let m: usize = sizes.iter().product();
    let k = sizes.len();
    let mut points = Array2::zeros((m, k));
    for row in 0..m {
        let mut rem = row;
        for axis in (0..k).rev() {
            let idx = rem % sizes[axis];
            rem /= sizes[axis];
            points[[row, axis]] = grid.coords[term.coords()[axis]].nodes[idx];
        }
    }
    TermGrid {
        points,
        sizes,
        weights,
    }
}

/// Splits a flattened product-grid row index into the node index along
/// `axis` and the C-order flattened index over the remaining axes.
#[inline]
fn split_index(row: usize, sizes: &[usize], axis: usize) -> (usize, usize) {
    let mut rem = row;
    let mut node = 0usize;
    let mut cond = 0usize;
    let mut mult = 1usize;
    for a in (0..sizes.len()).rev() {
        let idx = rem % sizes[a];
        rem /= sizes[a];
        if a == axis {
            node = idx;
        } else {
            cond += idx * mult;
            mult *= sizes[a];
        }
    }
    (node, cond)
}

/// Evaluates every constraint's residual field.
pub fn residuals(
    model: &DecompositionModel,
    cs: &ConstraintSet,
    estimator: Estimator,
) -> Result<Vec<ResidualField>> {
    let p = model.n_features();
    let mut out: Vec<Option<ResidualField>> = vec![None; cs.constraints.len()];

    match estimator {
        Estimator::Quadrature => {
            // Group constraints by term so each term network is evaluated
            // once on its full product grid.
            let groups = group_by_term(cs)?;
            for (term, constraint_indices) in groups {
                let net = model
                    .terms
                    .get(&term)
                    .ok_or_else(|| Error::Key(format!("constraint references unknown term {term}")))?;
                let tg = term_grid(&cs.grid, &term);
                let values = net.forward(&tg.points.view())?;
                for ci in constraint_indices {
                    let c = &cs.constraints[ci];
                    let axis = axis_of(&term, c.integrate_coord);
                    out[ci] = Some(ResidualField {
                        constraint_index: ci,
                        values: reduce_field(&values, &tg, axis, p),
                    });
                }
            }
        }
        Estimator::MonteCarlo { draws, seed } => {
            if draws == 0 {
                return Err(Error::Argument("Monte Carlo draws must be > 0".into()));
            }
            for (ci, c) in cs.constraints.iter().enumerate() {
                let net = model.terms.get(&c.term).ok_or_else(|| {
                    Error::Key(format!("constraint references unknown term {}", c.term))
                })?;
                let (points, n_cond, eff_draws, scale) =
                    mc_points(model, cs, c, draws, seed, ci)?;
                let values = net.forward(&points.view())?;
                let mut g = Array2::zeros((n_cond, p));
                for cond in 0..n_cond {
                    for d in 0..eff_draws {
                        let row = cond * eff_draws + d;
                        for j in 0..p {
                            g[[cond, j]] += scale * values[[row, j]];
                        }
                    }
                }
                out[ci] = Some(ResidualField {
                    constraint_index: ci,
                    values: g,
                });
            }
        }
    }
    Ok(out.into_iter().map(|r| r.expect("all filled")).collect())
}

/// Sample matrix for one constraint under the Monte Carlo estimator:
/// conditioning coordinates on the quadrature grid, `draws` uniform draws
/// along the integrated coordinate per conditioning point. Binary
/// coordinates fall back to their two levels.
fn mc_points(
    model: &DecompositionModel,
    cs: &ConstraintSet,
    c: &Constraint,
    draws: usize,
    seed: u64,
    constraint_index: usize,
) -> Result<(Array2<f64>, usize, usize, f64)> {
    let term = &c.term;
    let axis = axis_of(term, c.integrate_coord);
    let k = term.order();
    let cond_sizes: Vec<usize> = term
        .coords()
        .iter()
        .enumerate()
        .filter(|(a, _)| *a != axis)
        .map(|(_, &cc)| cs.grid.coords[cc].len())
        .collect();
    let n_cond: usize = cond_sizes.iter().product();

    let int_grid = &cs.grid.coords[c.integrate_coord];
    let (eff_draws, scale, binary) = if int_grid.binary {
        (2usize, 0.5, true)
    } else {
        let (lo, hi) = model.meta.domains[c.integrate_coord];
        (draws, (hi - lo) / draws as f64, false)
    };

    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ (constraint_index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let (lo, hi) = model.meta.domains[c.integrate_coord];
    let mut points = Array2::zeros((n_cond * eff_draws, k));
    for cond in 0..n_cond {
        // decode conditioning index into node positions
        let mut rem = cond;
        let mut cond_nodes = vec![0usize; cond_sizes.len()];
        for a in (0..cond_sizes.len()).rev() {
            cond_nodes[a] = rem % cond_sizes[a];
            rem /= cond_sizes[a];
        }
        for d in 0..eff_draws {
            let row = cond * eff_draws + d;
            let mut ca = 0usize;
            for a in 0..k {
                if a == axis {
                    points[[row, a]] = if binary {
                        d as f64
                    } else {
                        rng.random_range(lo..hi)
                    };
                } else {
                    let coord = term.coords()[a];
                    points[[row, a]] = cs.grid.coords[coord].nodes[cond_nodes[ca]];
                    ca += 1;
                }
            }
        }
    }
    Ok((points, n_cond, eff_draws, scale))
}

fn axis_of(term: &TermIndex, coord: usize) -> usize {
    term.coords()
        .iter()
        .position(|&c| c == coord)
        .expect("constraint coordinate belongs to its term")
}

fn group_by_term(cs: &ConstraintSet) -> Result<BTreeMap<TermIndex, Vec<usize>>> {
    let mut groups: BTreeMap<TermIndex, Vec<usize>> = BTreeMap::new();
    for (ci, c) in cs.constraints.iter().enumerate() {
        groups.entry(c.term.clone()).or_default().push(ci);
    }
    Ok(groups)
}

/// Scalar constraint augmentation and its gradients.
pub struct Augmentation {
    /// `sum_constraints <lambda, g>_grid + c_t <g, g>_grid` with the
    /// conditioning-coordinate quadrature weights as the inner product.
    pub value: f64,
    /// Gradients of the augmentation w.r.t. each term network's parameters.
    pub term_gradients: BTreeMap<TermIndex, GradientTape>,
}

/// Quadrature weight of each conditioning point: product over the
/// non-integrated axes.
fn cond_weights(tg: &TermGrid, axis: usize) -> Vec<f64> {
    let n_cond: usize = tg
        .sizes
        .iter()
        .enumerate()
        .filter(|(a, _)| *a != axis)
        .map(|(_, s)| s)
        .product();
    let mut out = vec![1.0; n_cond];
    for (cond, w_out) in out.iter_mut().enumerate() {
        let mut rem = cond;
        let mut w = 1.0;
        for a in (0..tg.sizes.len()).rev() {
            if a == axis {
                continue;
            }
            let idx = rem % tg.sizes[a];
            rem /= tg.sizes[a];
            w *= tg.weights[a][idx];
        }
        *w_out = w;
    }
    out
}

/// Residual field of one constraint from term values on the product grid.
fn reduce_field(
    values: &Array2<f64>,
    tg: &TermGrid,
    axis: usize,
    p: usize,
) -> Array2<f64> {
    let n_cond: usize = tg
        .sizes
        .iter()
        .enumerate()
        .filter(|(a, _)| *a != axis)
        .map(|(_, s)| s)
        .product();
    let mut g = Array2::zeros((n_cond, p));
    for row in 0..values.nrows() {
        let (node, cond) = split_index(row, &tg.sizes, axis);
        let w = tg.weights[axis][node];
        for j in 0..p {
            g[[cond, j]] += w * values[[row, j]];
        }
    }
    g
}

/// Adds one constraint's augmentation value and grid-point upstream
/// gradient: `d(value)/d f(node, j) = w_cond * w_axis * (lambda + 2 c g)`.
fn accumulate_penalty(
    cs: &ConstraintSet,
    ci: usize,
    tg: &TermGrid,
    axis: usize,
    g: &Array2<f64>,
    value: &mut f64,
    upstream: &mut Array2<f64>,
) -> Result<()> {
    let use_lambda = cs.method.uses_lambda();
    let use_quad = cs.method.uses_quadratic();
    let lambda = &cs.multipliers[ci];
    if lambda.dim() != g.dim() {
        return Err(Error::shape(
            format!("multipliers for constraint {}", cs.constraints[ci].label()),
            format!("{:?}", g.dim()),
            format!("{:?}", lambda.dim()),
        ));
    }
    let p = g.ncols();
    let w_cond = cond_weights(tg, axis);
    for cond in 0..g.nrows() {
        let w = w_cond[cond];
        for j in 0..p {
            let gv = g[[cond, j]];
            if use_lambda {
                *value += w * lambda[[cond, j]] * gv;
            }
            if use_quad {
                *value += w * cs.c_t * gv * gv;
            }
        }
    }
    for row in 0..upstream.nrows() {
        let (node, cond) = split_index(row, &tg.sizes, axis);
        let w = w_cond[cond] * tg.weights[axis][node];
        for j in 0..p {
            let mut coeff = 0.0;
            if use_lambda {
                coeff += lambda[[cond, j]];
            }
            if use_quad {
                coeff += 2.0 * cs.c_t * g[[cond, j]];
            }
            upstream[[row, j]] += w * coeff;
        }
    }
    Ok(())
}

/// Evaluates the constraint augmentation and its parameter gradients by
/// chaining through the quadrature-node evaluations.
pub fn penalty_terms(
    model: &DecompositionModel,
    cs: &ConstraintSet,
    fields: &[ResidualField],
) -> Result<Augmentation> {
    if fields.len() != cs.constraints.len() {
        return Err(Error::shape(
            "penalty terms",
            format!("{} residual fields", cs.constraints.len()),
            format!("{}", fields.len()),
        ));
    }
    for f in fields {
        if f.values.iter().any(|v| !v.is_finite()) {
            let c = &cs.constraints[f.constraint_index];
            return Err(Error::Numeric(format!(
                "non-finite residual for constraint {}",
                c.label()
            )));
        }
    }
    let p = model.n_features();
    let mut value = 0.0;
    let mut term_gradients: BTreeMap<TermIndex, GradientTape> = BTreeMap::new();
    for (term, constraint_indices) in group_by_term(cs)? {
        let net = model
            .terms
            .get(&term)
            .ok_or_else(|| Error::Key(format!("constraint references unknown term {term}")))?;
        let tg = term_grid(&cs.grid, &term);
        let (_, cache) = net.forward_cached(&tg.points.view())?;
        let mut upstream = Array2::zeros((tg.points.nrows(), p));
        for ci in constraint_indices {
            let axis = axis_of(&term, cs.constraints[ci].integrate_coord);
            accumulate_penalty(
                cs,
                ci,
                &tg,
                axis,
                &fields[ci].values,
                &mut value,
                &mut upstream,
            )?;
        }
        let (tape, _) = net.backward(&cache, &upstream.view())?;
        term_gradients.insert(term, tape);
    }
    Ok(Augmentation {
        value,
        term_gradients,
    })
}

/// Fused Monte Carlo pass: residual fields and penalty gradients through
/// the same uniform draws, so the chain rule runs through the sampled
/// node evaluations.
pub fn residuals_and_penalty_mc(
    model: &DecompositionModel,
    cs: &ConstraintSet,
    draws: usize,
    seed: u64,
) -> Result<(Vec<ResidualField>, Augmentation)> {
    if draws == 0 {
        return Err(Error::Argument("Monte Carlo draws must be > 0".into()));
    }
    let p = model.n_features();
    let mut fields = Vec::with_capacity(cs.constraints.len());
    let mut value = 0.0;
    let mut term_gradients: BTreeMap<TermIndex, GradientTape> = BTreeMap::new();
    let use_lambda = cs.method.uses_lambda();
    let use_quad = cs.method.uses_quadratic();
    for (ci, c) in cs.constraints.iter().enumerate() {
        let net = model
            .terms
            .get(&c.term)
            .ok_or_else(|| Error::Key(format!("constraint references unknown term {}", c.term)))?;
        let (points, n_cond, eff_draws, scale) = mc_points(model, cs, c, draws, seed, ci)?;
        let (values, cache) = net.forward_cached(&points.view())?;
        let mut g: Array2<f64> = Array2::zeros((n_cond, p));
        for cond in 0..n_cond {
            for d in 0..eff_draws {
                let row = cond * eff_draws + d;
                for j in 0..p {
                    g[[cond, j]] += scale * values[[row, j]];
                }
            }
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite residual for constraint {}",
                c.label()
            )));
        }
        let lambda = &cs.multipliers[ci];
        // conditioning weights on the quadrature grid, same as the
        // quadrature path
        let axis = axis_of(&c.term, c.integrate_coord);
        let tg = term_grid(&cs.grid, &c.term);
        let w_cond = cond_weights(&tg, axis);
        let mut upstream = Array2::zeros((points.nrows(), p));
        for cond in 0..n_cond {
            let w = w_cond[cond];
            for j in 0..p {
                let gv = g[[cond, j]];
                if use_lambda {
                    value += w * lambda[[cond, j]] * gv;
                }
                if use_quad {
                    value += w * cs.c_t * gv * gv;
                }
                let mut coeff = 0.0;
                if use_lambda {
                    coeff += lambda[[cond, j]];
                }
                if use_quad {
                    coeff += 2.0 * cs.c_t * gv;
                }
                let per_draw = w * coeff * scale;
                for d in 0..eff_draws {
                    upstream[[cond * eff_draws + d, j]] = per_draw;
                }
            }
        }
        let (tape, _) = net.backward(&cache, &upstream.view())?;
        match term_gradients.entry(c.term.clone()) {
            std::collections::btree_map::Entry::Vacant(e) => {
                e.insert(tape);
            }
            std::collections::btree_map::Entry::Occupied(mut e) => {
                e.get_mut().add_scaled(&tape, 1.0)?;
            }
        }
        fields.push(ResidualField {
            constraint_index: ci,
            values: g,
        });
    }
    Ok((
        fields,
        Augmentation {
            value,
            term_gradients,
        },
    ))
}

/// Fused quadrature pass used by the training loops: one forward per term
/// evaluates the residual fields, the augmentation value and its gradients
/// together. Equivalent to `residuals` + `penalty_terms`, sharing the node
/// evaluations.
pub fn residuals_and_penalty(
    model: &DecompositionModel,
    cs: &ConstraintSet,
) -> Result<(Vec<ResidualField>, Augmentation)> {
    let p = model.n_features();
    let mut fields: Vec<Option<ResidualField>> = vec![None; cs.constraints.len()];
    let mut value = 0.0;
    let mut term_gradients: BTreeMap<TermIndex, GradientTape> = BTreeMap::new();
    for (term, constraint_indices) in group_by_term(cs)? {
        let net = model
            .terms
            .get(&term)
            .ok_or_else(|| Error::Key(format!("constraint references unknown term {term}")))?;
        let tg = term_grid(&cs.grid, &term);
        let (values, cache) = net.forward_cached(&tg.points.view())?;
        let mut upstream = Array2::zeros((tg.points.nrows(), p));
        for ci in constraint_indices {
            let axis = axis_of(&term, cs.constraints[ci].integrate_coord);
            let g = reduce_field(&values, &tg, axis, p);
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite residual for constraint {}",
                    cs.constraints[ci].label()
                )));
            }
            accumulate_penalty(cs, ci, &tg, axis, &g, &mut value, &mut upstream)?;
            fields[ci] = Some(ResidualField {
                constraint_index: ci,
                values: g,
            });
        }
        let (tape, _) = net.backward(&cache, &upstream.view())?;
        term_gradients.insert(term, tape);
    }
    Ok((
        fields.into_iter().map(|f| f.expect("all filled")).collect(),
        Augmentation {
            value,
            term_gradients,
        },
    ))
}

/// Gradient-ascent multiplier update `lambda += eta * g`, advancing the
/// penalty schedule when due. Errors under the pure penalty method, which
/// has no multipliers to update.
pub fn multiplier_update(cs: &mut ConstraintSet, fields: &[ResidualField]) -> Result<()> {
    if cs.method == ConstraintMethod::Penalty {
        return Err(Error::State(
            "multiplier update is undefined for the pure penalty method".into(),
        ));
    }
    if fields.len() != cs.constraints.len() {
        return Err(Error::shape(
            "multiplier update",
            format!("{} residual fields", cs.constraints.len()),
            format!("{}", fields.len()),
        ));
    }
    for f in fields {
        let lambda = &mut cs.multipliers[f.constraint_index];
        if lambda.dim() != f.values.dim() {
            return Err(Error::shape(
                "multiplier update",
                format!("{:?}", lambda.dim()),
                format!("{:?}", f.values.dim()),
            ));
        }
        lambda.scaled_add(cs.eta, &f.values);
    }
    cs.update_count += 1;
    if cs.schedule.every > 0 && cs.update_count % cs.schedule.every == 0 {
        cs.c_t = (cs.c_t * cs.schedule.growth).min(cs.schedule.c_max);
    }
    Ok(())
}

/// Outcome of a tolerance check over all residual fields.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToleranceReport {
    pub pass: bool,
    pub epsilon: f64,
    pub max_abs_residual: f64,
    /// `(constraint label, max |g|)` for every constraint above tolerance.
    pub violators: Vec<(String, f64)>,
}

/// Pass iff `max |g| <= epsilon` over all constraints, conditioning points
/// and features.
pub fn check_tolerance(
    cs: &ConstraintSet,
    fields: &[ResidualField],
    epsilon: f64,
) -> Result<ToleranceReport> {
    if epsilon <= 0.0 {
        return Err(Error::Argument("tolerance epsilon must be > 0".into()));
    }
    let mut max_abs: f64 = 0.0;
    let mut violators = Vec::new();
    for f in fields {
        let m = f.max_abs();
        max_abs = max_abs.max(m);
        if m > epsilon {
            violators.push((cs.constraints[f.constraint_index].label(), m));
        }
    }
    Ok(ToleranceReport {
        pass: violators.is_empty(),
        epsilon,
        max_abs_residual: max_abs,
        violators,
    })
}

/// Empirical inner products `mean(f_I) . mean(f_J)` per feature between all
/// pairs of terms with disjoint index sets, evaluated as plain node
/// averages over the quadrature product grid (which factorises for
/// disjoint subsets). Returns `(I, J, max |inner product| over features)`.
pub fn disjoint_term_inner_products(
    model: &DecompositionModel,
    grid: &QuadratureGrid,
) -> Result<Vec<(TermIndex, TermIndex, f64)>> {
    let p = model.n_features();
    let mut means: BTreeMap<TermIndex, Array1<f64>> = BTreeMap::new();
    for (term, net) in &model.terms {
        let tg = term_grid(grid, term);
        let values = net.forward(&tg.points.view())?;
        let m = values.nrows() as f64;
        let mut mean = Array1::zeros(p);
        for row in values.rows() {
            for j in 0..p {
                mean[j] += row[j];
            }
        }
        mean.mapv_inplace(|v| v / m);
        means.insert(term.clone(), mean);
    }
    let terms: Vec<&TermIndex> = model.terms.keys().collect();
    let mut out = Vec::new();
    for i in 0..terms.len() {
        for j in i + 1..terms.len() {
            if terms[i].is_disjoint(terms[j]) {
                let mi = &means[terms[i]];
                let mj = &means[terms[j]];
                let max_ip = (0..p)
                    .map(|f| (mi[f] * mj[f]).abs())
                    .fold(0.0_f64, f64::max);
                out.push((terms[i].clone(), terms[j].clone(), max_ip));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decomp::{CoordKind, InputMeta};
    use crate::nn::{Activation, DenseLayer, DenseNet};
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn meta_2d(lo: f64, hi: f64) -> InputMeta {
        InputMeta::new(
            vec![CoordKind::Latent, CoordKind::Covariate],
            vec![(lo, hi), (lo, hi)],
            vec!["z".into(), "c".into()],
        )
        .unwrap()
    }

    fn affine_net(w: Vec<f64>, b: f64) -> DenseNet {
        let d = w.len();
        let weights = Array2::from_shape_vec((1, d), w).unwrap();
        DenseNet::new(vec![
            DenseLayer::new(weights, array![b], Activation::Identity).unwrap(),
        ])
        .unwrap()
    }

    fn model_with_terms(
        meta: InputMeta,
        terms: Vec<(Vec<usize>, DenseNet)>,
    ) -> DecompositionModel {
        let mut map = BTreeMap::new();
        for (coords, net) in terms {
            map.insert(TermIndex::new(coords).unwrap(), net);
        }
        DecompositionModel::new(array![0.0], map, array![0.0], meta).unwrap()
    }

    #[test]
    fn trapezoid_of_constant_is_span() {
        let grid = CoordGrid::continuous(-2.0, 2.0, 9).unwrap();
        let values = vec![1.0; 9];
        assert_abs_diff_eq!(trapezoid_integral(&values, &grid).unwrap(), 4.0, epsilon = 1e-12);
    }

    #[test]
    fn trapezoid_of_odd_function_vanishes() {
        let grid = CoordGrid::continuous(-2.0, 2.0, 17).unwrap();
        let values: Vec<f64> = grid.nodes.iter().map(|&x| x).collect();
        assert_abs_diff_eq!(trapezoid_integral(&values, &grid).unwrap(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn trapezoid_of_x_squared_five_nodes() {
        // hand sum: 1 * (2 + 1 + 0 + 1 + 2) = 6.0 (trapezoid overestimates 16/3)
        let grid = CoordGrid::continuous(-2.0, 2.0, 5).unwrap();
        let values: Vec<f64> = grid.nodes.iter().map(|&x| x * x).collect();
        assert_abs_diff_eq!(trapezoid_integral(&values, &grid).unwrap(), 6.0, epsilon = 1e-12);
    }

    #[test]
    fn trapezoid_length_mismatch() {
        let grid = CoordGrid::continuous(0.0, 1.0, 4).unwrap();
        assert!(matches!(
            trapezoid_integral(&[1.0, 2.0], &grid),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn binary_grid_weights_sum_to_one() {
        let g = CoordGrid::binary_levels();
        assert_eq!(g.nodes, vec![0.0, 1.0]);
        assert_abs_diff_eq!(g.volume(), 1.0);
    }

    fn default_cs(model: &DecompositionModel, g: usize) -> ConstraintSet {
        ConstraintSet::for_model(
            model,
            g,
            ConstraintMethod::Mdmm,
            PenaltySchedule::default(),
            1.0,
            1e-2,
        )
        .unwrap()
    }

    #[test]
    fn zero_term_network_has_zero_residuals() {
        let model = model_with_terms(
            meta_2d(-2.0, 2.0),
            vec![(vec![0], affine_net(vec![0.0], 0.0))],
        );
        let cs = default_cs(&model, 16);
        let fields = residuals(&model, &cs, Estimator::Quadrature).unwrap();
        assert_eq!(fields.len(), 1);
        assert_eq!(fields[0].max_abs(), 0.0);
    }

    #[test]
    fn affine_marginal_residual_closed_form() {
        // f_z(z) = z + 1 on [-2, 2]: integral = 4, exactly, on any grid.
        let model = model_with_terms(
            meta_2d(-2.0, 2.0),
            vec![(vec![0], affine_net(vec![1.0], 1.0))],
        );
        for g in [2, 5, 33] {
            let cs = default_cs(&model, g);
            let fields = residuals(&model, &cs, Estimator::Quadrature).unwrap();
            assert_abs_diff_eq!(fields[0].values[[0, 0]], 4.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn odd_interaction_residual_field_vanishes() {
        // f(z, c) = z * c: integral over z is 0 for every c on a symmetric
        // grid. A product cannot be built from one dense layer, so check
        // the equivalent: f(z,c) = z, integrated over z, conditioned on c.
        let model = model_with_terms(
            meta_2d(-2.0, 2.0),
            vec![(vec![0, 1], affine_net(vec![1.0, 0.0], 0.0))],
        );
        let cs = default_cs(&model, 9);
        let fields = residuals(&model, &cs, Estimator::Quadrature).unwrap();
        // constraint 0 integrates coord 0: residual 0 at every c node
        assert!(fields[0].max_abs() < 1e-12);
        // constraint 1 integrates coord 1: residual 4 z at every z node
        let g_z = &fields[1].values;
        let z_nodes = &cs.grid.coords[0].nodes;
        for (i, &z) in z_nodes.iter().enumerate() {
            assert_abs_diff_eq!(g_z[[i, 0]], 4.0 * z, epsilon = 1e-12);
        }
    }

    #[test]
    fn missing_term_is_key_error() {
        let model_a = model_with_terms(
            meta_2d(-2.0, 2.0),
            vec![(vec![0], affine_net(vec![1.0], 0.0))],
        );
        let model_b = model_with_terms(
            meta_2d(-2.0, 2.0),
            vec![(vec![1], affine_net(vec![1.0], 0.0))],
        );
        let cs = default_cs(&model_a, 8);
        assert!(matches!(
            residuals(&model_b, &cs, Estimator::Quadrature),
            Err(Error::Key(_))
        ));
    }

    #[test]
    fn augmentation_zero_when_constraints_fulfilled() {
        let model = model_with_terms(
            meta_2d(-2.0, 2.0),
            vec![(vec![0], affine_net(vec![1.0], 0.0))], // odd, integrates to 0
        );
        let cs = default_cs(&model, 9);
        let fields = residuals(&model, &cs, Estimator::Quadrature).unwrap();
        let aug = penalty_terms(&model, &cs, &fields).unwrap();
        assert_abs_diff_eq!(aug.value, 0.0, epsilon = 1e-20);
    }

    #[test]
    fn scalar_augmentation_arithmetic() {
        // g = 2, lambda = 1, c = 0.5: augmentation = 1*2 + 0.5*4 = 4.
        let model = model_with_terms(
            meta_2d(-2.0, 2.0),
            vec![(vec![0], affine_net(vec![0.0], 0.5))], // integral = 0.5 * 4 = 2
        );
        let mut cs = default_cs(&model, 9);
        cs.c_t = 0.5;
        cs.multipliers[0].fill(1.0);
        let fields = residuals(&model, &cs, Estimator::Quadrature).unwrap();
        assert_abs_diff_eq!(fields[0].values[[0, 0]], 2.0, epsilon = 1e-12);
        let aug = penalty_terms(&model, &cs, &fields).unwrap();
        assert_abs_diff_eq!(aug.value, 4.0, epsilon = 1e-12);
    }

    #[test]
    fn augmentation_gradient_matches_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(21);
        let net = DenseNet::mlp(&[2, 8, 2], Activation::Softplus, &mut rng).unwrap();
        let mut map = BTreeMap::new();
        map.insert(TermIndex::new(vec![0, 1]).unwrap(), net);
        let mut model = DecompositionModel::new(
            array![0.0, 0.0],
            map,
            array![0.0, 0.0],
            meta_2d(-2.0, 2.0),
        )
        .unwrap();
        let mut cs = ConstraintSet::for_model(
            &model,
            8,
            ConstraintMethod::Mdmm,
            PenaltySchedule::default(),
            1.0,
            1e-2,
        )
        .unwrap();
        cs.c_t = 0.7;
        for l in &mut cs.multipliers {
            let mut v = 0.05;
            l.mapv_inplace(|_| {
                v += 0.013;
                v
            });
        }
        let term = TermIndex::new(vec![0, 1]).unwrap();

        let aug_value = |model: &DecompositionModel| {
            let fields = residuals(model, &cs, Estimator::Quadrature).unwrap();
            penalty_terms(model, &cs, &fields).unwrap().value
        };
        let fields = residuals(&model, &cs, Estimator::Quadrature).unwrap();
        let aug = penalty_terms(&model, &cs, &fields).unwrap();
        let tape = &aug.term_gradients[&term];

        let step = 1e-6;
        for layer in 0..2 {
            let n_w = model.terms[&term].layers[layer].weights.len();
            for idx in (0..n_w).step_by(3) {
                let analytic = tape.layers[layer].0.as_slice().unwrap()[idx];
                let orig = model.terms.get_mut(&term).unwrap().layers[layer]
                    .weights
                    .as_slice_mut()
                    .unwrap()[idx];
                model.terms.get_mut(&term).unwrap().layers[layer]
                    .weights
                    .as_slice_mut()
                    .unwrap()[idx] = orig + step;
                let plus = aug_value(&model);
                model.terms.get_mut(&term).unwrap().layers[layer]
                    .weights
                    .as_slice_mut()
                    .unwrap()[idx] = orig - step;
                let minus = aug_value(&model);
                model.terms.get_mut(&term).unwrap().layers[layer]
                    .weights
                    .as_slice_mut()
                    .unwrap()[idx] = orig;
                let numeric = (plus - minus) / (2.0 * step);
                let rel = crate::nn::fd_rel_error(analytic, numeric);
                assert!(rel < 1e-4, "layer {layer} idx {idx}: rel err {rel}");
            }
        }
    }

    #[test]
    fn multiplier_update_arithmetic() {
        // lambda = 0.5, eta = 0.1, g = 2.0 -> lambda' = 0.7.
        let model = model_with_terms(
            meta_2d(-2.0, 2.0),
            vec![(vec![0], affine_net(vec![0.0], 0.5))],
        );
        let mut cs = ConstraintSet::for_model(
            &model,
            8,
            ConstraintMethod::Bdmm,
            PenaltySchedule::default(),
            0.1,
            1e-2,
        )
        .unwrap();
        cs.multipliers[0].fill(0.5);
        let fields = residuals(&model, &cs, Estimator::Quadrature).unwrap();
        multiplier_update(&mut cs, &fields).unwrap();
        assert_abs_diff_eq!(cs.multipliers[0][[0, 0]], 0.7, epsilon = 1e-12);
    }

    #[test]
    fn multiplier_update_noop_on_zero_residual() {
        let model = model_with_terms(
            meta_2d(-2.0, 2.0),
            vec![(vec![0], affine_net(vec![1.0], 0.0))],
        );
        let mut cs = default_cs(&model, 9);
        cs.multipliers[0].fill(0.25);
        let fields = residuals(&model, &cs, Estimator::Quadrature).unwrap();
        multiplier_update(&mut cs, &fields).unwrap();
        assert!(cs.multipliers[0].iter().all(|&l| l == 0.25));
    }

    #[test]
    fn multiplier_update_rejected_for_penalty_method() {
        let model = model_with_terms(
            meta_2d(-2.0, 2.0),
            vec![(vec![0], affine_net(vec![0.0], 0.5))],
        );
        let mut cs = ConstraintSet::for_model(
            &model,
            8,
            ConstraintMethod::Penalty,
            PenaltySchedule::default(),
            1.0,
            1e-2,
        )
        .unwrap();
        let fields = residuals(&model, &cs, Estimator::Quadrature).unwrap();
        assert!(matches!(
            multiplier_update(&mut cs, &fields),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn persistent_positive_residual_grows_multiplier() {
        let model = model_with_terms(
            meta_2d(-2.0, 2.0),
            vec![(vec![0], affine_net(vec![0.0], 1.0))], // g = 4 forever
        );
        let mut cs = ConstraintSet::for_model(
            &model,
            8,
            ConstraintMethod::Mdmm,
            PenaltySchedule::default(),
            0.05,
            1e-2,
        )
        .unwrap();
        let mut last = 0.0;
        for _ in 0..5 {
            let fields = residuals(&model, &cs, Estimator::Quadrature).unwrap();
            multiplier_update(&mut cs, &fields).unwrap();
            let now = cs.multipliers[0][[0, 0]];
            assert!(now > last);
            last = now;
        }
    }

    #[test]
    fn tolerance_check_passes_for_zero_model() {
        let model = model_with_terms(
            meta_2d(-2.0, 2.0),
            vec![(vec![0], affine_net(vec![0.0], 0.0))],
        );
        let cs = default_cs(&model, 8);
        let fields = residuals(&model, &cs, Estimator::Quadrature).unwrap();
        let report = check_tolerance(&cs, &fields, 1e-9).unwrap();
        assert!(report.pass);
    }

    #[test]
    fn tolerance_check_reports_violation() {
        // f_z(z) = z + 1 on [-2, 2]: max |g| = 4 fails at eps = 1e-2.
        let model = model_with_terms(
            meta_2d(-2.0, 2.0),
            vec![(vec![0], affine_net(vec![1.0], 1.0))],
        );
        let cs = default_cs(&model, 16);
        let fields = residuals(&model, &cs, Estimator::Quadrature).unwrap();
        let report = check_tolerance(&cs, &fields, 1e-2).unwrap();
        assert!(!report.pass);
        assert_abs_diff_eq!(report.max_abs_residual, 4.0, epsilon = 1e-12);
        assert_eq!(report.violators.len(), 1);
    }

    #[test]
    fn tolerance_zero_epsilon_rejected() {
        let model = model_with_terms(
            meta_2d(-2.0, 2.0),
            vec![(vec![0], affine_net(vec![0.0], 0.0))],
        );
        let cs = default_cs(&model, 8);
        let fields = residuals(&model, &cs, Estimator::Quadrature).unwrap();
        assert!(matches!(
            check_tolerance(&cs, &fields, 0.0),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn monte_carlo_agrees_with_quadrature_within_three_standard_errors() {
        let mut rng = ChaCha12Rng::seed_from_u64(33);
        let net = DenseNet::mlp(&[1, 16, 1], Activation::Softplus, &mut rng).unwrap();
        let model = model_with_terms(meta_2d(-2.0, 2.0), vec![(vec![0], net)]);
        let cs = default_cs(&model, 64);
        let quad = residuals(&model, &cs, Estimator::Quadrature).unwrap()[0].values[[0, 0]];

        let draws = 100_000;
        let mc = residuals(
            &model,
            &cs,
            Estimator::MonteCarlo {
                draws,
                seed: 2024,
            },
        )
        .unwrap()[0]
            .values[[0, 0]];

        // standard error of the Monte Carlo mean, scaled by the volume
        let mut rng2 = ChaCha12Rng::seed_from_u64(7);
        let samples: Vec<f64> = (0..20_000)
            .map(|_| {
                let x = array![[rng2.random_range(-2.0..2.0)]];
                model.terms.values().next().unwrap().forward(&x.view()).unwrap()[[0, 0]]
            })
            .collect();
        let mean = samples.iter().sum::<f64>() / samples.len() as f64;
        let var = samples.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
            / (samples.len() - 1) as f64;
        let se = 4.0 * (var / draws as f64).sqrt();
        assert!(
            (mc - quad).abs() <= 3.0 * se + 1e-3,
            "mc {mc} vs quad {quad}, 3 se = {}",
            3.0 * se
        );
    }

    proptest! {
        /// Trapezoid quadrature is exact for affine integrands on any grid.
        #[test]
        fn trapezoid_exact_for_affine(
            a in -5.0f64..5.0,
            b in -5.0f64..5.0,
            lo in -4.0f64..0.0,
            span in 0.5f64..6.0,
            g in 2usize..40,
        ) {
            let hi = lo + span;
            let grid = CoordGrid::continuous(lo, hi, g).unwrap();
            let values: Vec<f64> = grid.nodes.iter().map(|&x| a * x + b).collect();
            let estimate = trapezoid_integral(&values, &grid).unwrap();
            let exact = a * (hi * hi - lo * lo) / 2.0 + b * (hi - lo);
            prop_assert!((estimate - exact).abs() < 1e-12 * (1.0 + exact.abs()));
        }

        /// Irregular grids keep affine exactness too.
        #[test]
        fn trapezoid_exact_for_affine_irregular(
            a in -3.0f64..3.0,
            b in -3.0f64..3.0,
            mut raw in proptest::collection::vec(0.001f64..1.0, 3..20),
        ) {
            let mut nodes = vec![0.0];
            for r in raw.drain(..) {
                nodes.push(nodes.last().unwrap() + r);
            }
            let (lo, hi) = (nodes[0], *nodes.last().unwrap());
            let grid = CoordGrid::from_nodes(nodes).unwrap();
            let values: Vec<f64> = grid.nodes.iter().map(|&x| a * x + b).collect();
            let estimate = trapezoid_integral(&values, &grid).unwrap();
            let exact = a * (hi * hi - lo * lo) / 2.0 + b * (hi - lo);
            prop_assert!((estimate - exact).abs() < 1e-12 * (1.0 + exact.abs()));
        }
    }
}
