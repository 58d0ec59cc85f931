//! Constrained-optimization comparison on a single two-input term network.
//!
//! One interaction network is fitted by least squares to a target whose
//! marginal integrals are far from zero, under the constraint that both of
//! its own marginals vanish. The penalty method, BDMM and MDMM are run on
//! identical data and initialisation so their residual traces can be
//! compared directly: the fixed penalty settles at a biased equilibrium,
//! BDMM oscillates its way down, and MDMM converges fastest.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::constraint::{
    multiplier_update, residuals, residuals_and_penalty, ConstraintMethod, ConstraintSet,
    Estimator, PenaltySchedule,
};
use crate::decomp::{CoordKind, DecompositionModel, InputMeta, TermIndex};
use crate::error::Result;
use crate::nn::{sgd_step, Activation, DenseNet};

/// Configuration for one method's run of the trace experiment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceConfig {
    pub method: ConstraintMethod,
    pub iterations: usize,
    pub grid_size: usize,
    /// Multiplier learning rate, shared across methods when comparing.
    pub eta: f64,
    /// Fixed penalty coefficient, shared across methods when comparing.
    pub c: f64,
    pub learning_rate: f64,
    pub seed: u64,
    pub n_points: usize,
    pub hidden_units: usize,
    /// Residual fields are recorded every this many iterations.
    pub record_every: usize,
}

impl Default for TraceConfig {
    fn default() -> Self {
        TraceConfig {
            method: ConstraintMethod::Mdmm,
            iterations: 30_000,
            grid_size: 32,
            eta: 1.0,
            c: 5.0,
            learning_rate: 1e-4,
            seed: 0,
            n_points: 256,
            hidden_units: 64,
            record_every: 100,
        }
    }
}

/// Residual and multiplier snapshot at one recorded iteration.
#[derive(Debug, Clone)]
pub struct TraceRecord {
    pub iteration: usize,
    /// Per constraint: flattened residual field `[n_cond]` (single feature).
    pub residuals: Vec<Vec<f64>>,
    pub multipliers: Vec<Vec<f64>>,
    pub c_t: f64,
    pub data_loss: f64,
}

/// Full outcome of one method's run.
#[derive(Debug, Clone)]
pub struct TraceRun {
    pub method: ConstraintMethod,
    pub constraint_labels: Vec<String>,
    pub records: Vec<TraceRecord>,
    /// `max |g|` over all constraints at every iteration.
    pub per_iteration_max_g: Vec<f64>,
    pub final_max_g: f64,
}

impl TraceRun {
    /// First iteration after which `max |g|` stays below `tol` for the rest
    /// of the run.
    pub fn sustained_below(&self, tol: f64) -> Option<usize> {
        let mut first: Option<usize> = None;
        for (i, &g) in self.per_iteration_max_g.iter().enumerate() {
            if g < tol {
                first.get_or_insert(i);
            } else {
                first = None;
            }
        }
        first
    }

    /// Residual time series of one grid point of one constraint, at the
    /// recorded stride.
    pub fn grid_series(&self, constraint: usize, grid_index: usize) -> Vec<f64> {
        self.records
            .iter()
            .map(|r| r.residuals[constraint][grid_index])
            .collect()
    }
}

/// Number of strict sign flips in a series, skipping zeros.
pub fn sign_changes(series: &[f64]) -> usize {
    let mut count = 0;
    let mut last = 0.0_f64;
    for &v in series {
        if v == 0.0 {
            continue;
        }
        if last != 0.0 && v.signum() != last.signum() {
            count += 1;
        }
        last = v;
    }
    count
}

/// Target with strongly non-zero marginals, so the data term fights the
/// integral constraints.
fn target(x1: f64, x2: f64) -> f64 {
    (-x1 * x1).exp() + 0.3 * x2.tanh() + 0.2 * x1 * x2
}

/// Runs one method's constrained least-squares fit and records its
/// residual traces.
pub fn run_trace_experiment(cfg: &TraceConfig) -> Result<TraceRun> {
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let meta = InputMeta::new(
        vec![CoordKind::Covariate, CoordKind::Covariate],
        vec![(-2.0, 2.0), (-2.0, 2.0)],
        vec!["x1".into(), "x2".into()],
    )?;
    let term = TermIndex::new(vec![0, 1])?;
    let net = DenseNet::mlp(&[2, cfg.hidden_units, 1], Activation::Softplus, &mut rng)?;
    let mut terms = BTreeMap::new();
    terms.insert(term.clone(), net);
    let mut model = DecompositionModel::new(
        ndarray::Array1::zeros(1),
        terms,
        ndarray::Array1::zeros(1),
        meta,
    )?;

    let x = Array2::from_shape_fn((cfg.n_points, 2), |_| rng.random_range(-2.0..2.0));
    let t = Array2::from_shape_fn((cfg.n_points, 1), |(i, _)| target(x[[i, 0]], x[[i, 1]]));

    let schedule = PenaltySchedule {
        c0: cfg.c,
        growth: 1.0,
        every: 0,
        c_max: cfg.c,
    };
    let mut cs = ConstraintSet::for_model(
        &model,
        cfg.grid_size,
        cfg.method,
        schedule,
        cfg.eta,
        1e-2,
    )?;
    let constraint_labels = cs.constraints.iter().map(|c| c.label()).collect();

    let mut records = Vec::new();
    let mut per_iteration_max_g = Vec::with_capacity(cfg.iterations);
    for iter in 0..cfg.iterations {
        let net = model.terms.get(&term).unwrap();
        let (y, cache) = net.forward_cached(&x.view())?;
        let diff = &y - &t;
        // summed squared error, matching the summed-likelihood scale the
        // penalties are balanced against
        let data_loss = diff.iter().map(|d| d * d).sum::<f64>();
        let upstream = diff.mapv(|d| 2.0 * d);
        let (mut tape, _) = net.backward(&cache, &upstream.view())?;

        let (fields, aug) = residuals_and_penalty(&model, &cs)?;
        let max_g = fields.iter().map(|f| f.max_abs()).fold(0.0, f64::max);
        per_iteration_max_g.push(max_g);
        tape.add_scaled(&aug.term_gradients[&term], 1.0)?;

        if iter % cfg.record_every == 0 || iter + 1 == cfg.iterations {
            records.push(TraceRecord {
                iteration: iter,
                residuals: fields
                    .iter()
                    .map(|f| f.values.column(0).to_vec())
                    .collect(),
                multipliers: cs
                    .multipliers
                    .iter()
                    .map(|l| l.column(0).to_vec())
                    .collect(),
                c_t: cs.c_t,
                data_loss,
            });
        }

        sgd_step(model.terms.get_mut(&term).unwrap(), &tape, cfg.learning_rate)?;
        if cfg.method != ConstraintMethod::Penalty {
            multiplier_update(&mut cs, &fields)?;
        }
    }

    let fields = residuals(&model, &cs, Estimator::Quadrature)?;
    let final_max_g = fields.iter().map(|f| f.max_abs()).fold(0.0, f64::max);
    Ok(TraceRun {
        method: cfg.method,
        constraint_labels,
        records,
        per_iteration_max_g,
        final_max_g,
    })
}
