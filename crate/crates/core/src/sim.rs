//! Synthetic confounded recommendation worlds with known potential
//! outcomes.
//!
//! Each world draws a per-user confounder vector that drives both which
//! items the user is exposed to and (partially) how they would rate them,
//! so observed ratings are missing not-at-random by construction. Because
//! the full potential-outcome matrix is retained, the exact causal error
//! of any predictor can be computed, along with its randomized-subset
//! estimate, and methods can be compared across confounding strengths
//! with the [`sweep`] harness.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Poisson};
use rayon::prelude::*;

use crate::data::{split, SparseInteractions, SplitMode, SplitSpec};
use crate::error::{Error, Result};
use crate::ipw::{fit_propensity, PropensityConfig};
use crate::matrix::{dot, Matrix};
use crate::metrics::{ndcg, GainScheme, RankedList};
use crate::outcome::{fit_outcome, predict_existing, Correction, OutcomeConfig};
use crate::pf::{compute_substitute, fit_pf, PFConfig};

/// Generator parameters for one simulated world.
#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub n_users: usize,
    pub n_items: usize,
    /// Latent dimension of the generator (independent of any model's K).
    pub k: usize,
    /// Exposure-confounder correlation in [0, 1]: the user preference is
    /// the convex combination `gamma_theta * c_u + (1 - gamma_theta) *
    /// fresh_u` of the confounder and an independent draw.
    pub gamma_theta: f64,
    /// How strongly the confounder shifts outcomes (>= 0): ratings center
    /// on `(theta_u + gamma_y * c_u) . beta_i`.
    pub gamma_y: f64,
    /// Shape of the Gamma prior behind every latent factor coordinate.
    pub gamma_shape: f64,
    /// Rate of that Gamma prior. The default (10/3, i.e. scale 0.3)
    /// keeps factor coordinates small so that exposures stay sparse
    /// (roughly 7% dense at K=10) and potential ratings spread over the
    /// whole 1..=5 scale; a rate of 0.3 (mean-1 coordinates) saturates
    /// the world — nearly every pair exposed, nearly every rating 5.
    pub gamma_rate: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_users: 500,
            n_items: 500,
            k: 10,
            gamma_theta: 0.6,
            gamma_y: 3.0,
            gamma_shape: 0.3,
            gamma_rate: 10.0 / 3.0,
            seed: 0,
        }
    }
}

impl SimConfig {
    fn validate(&self) -> Result<()> {
        if self.n_users == 0 || self.n_items == 0 || self.k == 0 {
            return Err(Error::InvalidConfig(
                "simulation dimensions must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.gamma_theta) {
            return Err(Error::InvalidConfig(format!(
                "gamma_theta must lie in [0, 1], got {}",
                self.gamma_theta
            )));
        }
        if !(self.gamma_y >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "gamma_y must be non-negative, got {}",
                self.gamma_y
            )));
        }
        if !(self.gamma_shape > 0.0) || !(self.gamma_rate > 0.0) {
            return Err(Error::InvalidConfig(
                "gamma prior shape and rate must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// One simulated world, retaining everything the generator knew.
#[derive(Debug, Clone, PartialEq)]
pub struct SimWorld {
    pub cfg: SimConfig,
    /// U x K per-user confounders.
    pub c: Matrix,
    /// I x K item attributes.
    pub beta: Matrix,
    /// U x K user preferences (`gamma_theta`-blend of confounder and an
    /// independent draw).
    pub theta: Matrix,
    /// U x I exposure indicators in {0, 1}.
    pub exposures: Matrix,
    /// U x I potential outcomes under exposure, integers in 1..=5.
    pub potential: Matrix,
    /// Ratings revealed by the exposure mask: `y = a * y(1)`.
    pub observed: SparseInteractions,
}

impl SimWorld {
    #[must_use]
    pub fn n_users(&self) -> usize {
        self.c.rows()
    }

    #[must_use]
    pub fn n_items(&self) -> usize {
        self.beta.rows()
    }
}

/// Draws a complete world.
///
/// Sampling order is fixed (confounders, item attributes, the fresh
/// preference draws, then exposures and potentials row-major), so a seed
/// pins every value. Exposures are `min(Poisson(c_u . beta_i), 1)` and
/// potentials `min(1 + Poisson((theta_u + gamma_y c_u) . beta_i), 5)`.
pub fn generate(cfg: &SimConfig) -> Result<SimWorld> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let gamma = Gamma::new(cfg.gamma_shape, 1.0 / cfg.gamma_rate)
        .map_err(|e| Error::InvalidConfig(format!("gamma prior: {e}")))?;
    let (n_users, n_items, k) = (cfg.n_users, cfg.n_items, cfg.k);

    let c = Matrix::from_fn(n_users, k, |_, _| gamma.sample(&mut rng));
    let beta = Matrix::from_fn(n_items, k, |_, _| gamma.sample(&mut rng));
    let fresh = Matrix::from_fn(n_users, k, |_, _| gamma.sample(&mut rng));
    let theta = Matrix::from_fn(n_users, k, |u, kk| {
        cfg.gamma_theta * c.get(u, kk) + (1.0 - cfg.gamma_theta) * fresh.get(u, kk)
    });

    let mut draw_poisson = |rate: f64| -> f64 {
        let dist = Poisson::new(rate.max(1e-12)).expect("positive rate");
        dist.sample(&mut rng)
    };
    let exposures = Matrix::from_fn(n_users, n_items, |u, i| {
        draw_poisson(dot(c.row(u), beta.row(i))).min(1.0)
    });
    let potential = Matrix::from_fn(n_users, n_items, |u, i| {
        let rate: f64 = (0..k)
            .map(|kk| (theta.get(u, kk) + cfg.gamma_y * c.get(u, kk)) * beta.get(i, kk))
            .sum();
        (1.0 + draw_poisson(rate)).min(5.0)
    });

    let mut triplets = Vec::new();
    for u in 0..n_users {
        for i in 0..n_items {
            if exposures.get(u, i) > 0.0 {
                triplets.push((u as u32, i as u32, potential.get(u, i)));
            }
        }
    }
    let observed = SparseInteractions::from_triplets(n_users, n_items, triplets)?;

    Ok(SimWorld {
        cfg: cfg.clone(),
        c,
        beta,
        theta,
        exposures,
        potential,
        observed,
    })
}

/// Which per-user loss the causal-error estimators aggregate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CausalLoss {
    /// Mean squared error against the potential outcomes (0 is best).
    Mse,
    /// NDCG of the prediction-ranked item list with potential outcomes as
    /// gains (1 is best).
    Ndcg,
}

/// Exact causal error: the per-user loss of the predictions against the
/// potential outcomes over **all** items, averaged over users.
pub fn causal_error(
    world: &SimWorld,
    mut predict: impl FnMut(usize, usize) -> f64,
    loss: CausalLoss,
) -> f64 {
    let (n_users, n_items) = (world.n_users(), world.n_items());
    match loss {
        CausalLoss::Mse => {
            let mut total = 0.0;
            for u in 0..n_users {
                let mut user_sq = 0.0;
                for i in 0..n_items {
                    let err = predict(u, i) - world.potential.get(u, i);
                    user_sq += err * err;
                }
                total += user_sq / n_items as f64;
            }
            total / n_users as f64
        }
        CausalLoss::Ndcg => {
            let lists: Vec<RankedList> = (0..n_users)
                .map(|u| {
                    let scored = (0..n_items)
                        .map(|i| (i as u32, predict(u, i), world.potential.get(u, i)))
                        .collect();
                    RankedList::from_scored(u as u32, scored)
                })
                .collect();
            ndcg(&lists, GainScheme::ExpMinusOne)
        }
    }
}

/// Randomized-subset estimate of the causal error: the same per-user loss
/// computed only on a uniformly drawn item subset per user. Over repeated
/// subset draws its mean approaches [`causal_error`]; with every subset
/// equal to the full catalog the two coincide exactly.
///
/// Users with an empty subset are skipped (with a warning); the average
/// runs over the remaining users.
pub fn randomized_test_error(
    world: &SimWorld,
    item_subsets: &[Vec<u32>],
    mut predict: impl FnMut(usize, usize) -> f64,
    loss: CausalLoss,
) -> Result<f64> {
    let n_users = world.n_users();
    if item_subsets.len() != n_users {
        return Err(Error::invalid(format!(
            "got {} item subsets for {} users",
            item_subsets.len(),
            n_users
        )));
    }
    for subset in item_subsets {
        for &i in subset {
            if i as usize >= world.n_items() {
                return Err(Error::IndexOutOfRange {
                    what: "item",
                    index: i as usize,
                    bound: world.n_items(),
                });
            }
        }
    }

    let mut total = 0.0;
    let mut users = 0usize;
    let mut skipped = 0usize;
    let mut lists: Vec<RankedList> = Vec::new();
    for (u, subset) in item_subsets.iter().enumerate() {
        if subset.is_empty() {
            skipped += 1;
            continue;
        }
        match loss {
            CausalLoss::Mse => {
                let mut user_sq = 0.0;
                for &i in subset {
                    let err = predict(u, i as usize) - world.potential.get(u, i as usize);
                    user_sq += err * err;
                }
                total += user_sq / subset.len() as f64;
                users += 1;
            }
            CausalLoss::Ndcg => {
                let scored = subset
                    .iter()
                    .map(|&i| {
                        (i, predict(u, i as usize), world.potential.get(u, i as usize))
                    })
                    .collect();
                lists.push(RankedList::from_scored(u as u32, scored));
            }
        }
    }
    if skipped > 0 {
        log::warn!("{skipped} users had empty item subsets and were skipped");
    }
    match loss {
        CausalLoss::Mse => {
            if users == 0 {
                Err(Error::invalid("every user's item subset was empty"))
            } else {
                Ok(total / users as f64)
            }
        }
        CausalLoss::Ndcg => {
            if lists.is_empty() {
                Err(Error::invalid("every user's item subset was empty"))
            } else {
                Ok(ndcg(&lists, GainScheme::ExpMinusOne))
            }
        }
    }
}

/// Draws one uniform item subset (without replacement) per user.
#[must_use]
pub fn draw_item_subsets(
    n_users: usize,
    n_items: usize,
    subset_size: usize,
    seed: u64,
) -> Vec<Vec<u32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = subset_size.min(n_items);
    (0..n_users)
        .map(|_| {
            let mut subset: Vec<u32> = rand::seq::index::sample(&mut rng, n_items, size)
                .into_iter()
                .map(|i| i as u32)
                .collect();
            subset.sort_unstable();
            subset
        })
        .collect()
}

/// One fitting recipe evaluated by [`sweep`].
#[derive(Debug, Clone)]
pub enum SweepMethod {
    /// Predicts the potential outcomes exactly; diagnostic bound.
    Oracle,
    Model(ModelSpec),
}

/// A named model pipeline: exposure model (used when the correction needs
/// a substitute), propensity model (used by the IPW correction), and the
/// outcome configuration.
#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub name: String,
    pub pf: PFConfig,
    pub propensity: PropensityConfig,
    pub outcome: OutcomeConfig,
}

impl SweepMethod {
    #[must_use]
    pub fn name(&self) -> &str {
        match self {
            SweepMethod::Oracle => "oracle",
            SweepMethod::Model(spec) => &spec.name,
        }
    }
}

/// One (grid point, method, metric, run) measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub gamma_theta: f64,
    pub gamma_y: f64,
    pub method: String,
    pub metric: String,
    pub run: usize,
    pub value: f64,
}

/// Mean and standard error over a sweep cell's runs.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepAggregate {
    pub gamma_theta: f64,
    pub gamma_y: f64,
    pub method: String,
    pub metric: String,
    pub runs: usize,
    pub mean: f64,
    pub stderr: f64,
}

/// Everything a sweep produced: per-run rows in deterministic order, plus
/// a description of any run that failed (the sweep continues past
/// failures; failed runs contribute no rows).
#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub rows: Vec<SweepRow>,
    pub failures: Vec<String>,
}

/// Deterministic per-run world seed. Run 0 reuses the config seed.
#[must_use]
fn run_seed(base: u64, run: usize) -> u64 {
    base.wrapping_add((run as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Evaluates every method on freshly generated worlds at every grid
/// point, `runs` times.
///
/// Worlds are paired: at a given grid point, run r uses one world shared
/// by all methods, so per-run method comparisons are apples-to-apples.
/// Grid-point/run cells execute in parallel, but each cell owns its
/// seeded generators and results are assembled in grid order, so the
/// output is deterministic regardless of scheduling.
pub fn sweep(grid: &[SimConfig], methods: &[SweepMethod], runs: usize) -> Result<SweepOutcome> {
    if grid.is_empty() {
        return Err(Error::invalid("sweep grid is empty"));
    }
    if methods.is_empty() {
        return Err(Error::invalid("sweep needs at least one method"));
    }
    if runs == 0 {
        return Err(Error::invalid("sweep needs at least one run"));
    }

    let tasks: Vec<(usize, usize)> = (0..grid.len())
        .flat_map(|g| (0..runs).map(move |r| (g, r)))
        .collect();
    let cells: Vec<(Vec<SweepRow>, Vec<String>)> = tasks
        .par_iter()
        .map(|&(g, r)| run_cell(&grid[g], methods, r))
        .collect();

    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (mut cell_rows, mut cell_failures) in cells {
        rows.append(&mut cell_rows);
        failures.append(&mut cell_failures);
    }
    Ok(SweepOutcome { rows, failures })
}

/// One grid-point/run cell: generate the shared world, evaluate every
/// method on it.
fn run_cell(point: &SimConfig, methods: &[SweepMethod], run: usize) -> (Vec<SweepRow>, Vec<String>) {
    let mut cfg = point.clone();
    cfg.seed = run_seed(point.seed, run);
    let describe = |method: &SweepMethod, err: &Error| {
        format!(
            "gamma_theta={} gamma_y={} run={} method={}: {err}",
            point.gamma_theta,
            point.gamma_y,
            run,
            method.name()
        )
    };

    let world = match generate(&cfg) {
        Ok(world) => world,
        Err(err) => {
            let failures = methods
                .iter()
                .map(|m| describe(m, &err))
                .collect();
            return (Vec::new(), failures);
        }
    };

    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for method in methods {
        match evaluate_method(&world, method, cfg.seed) {
            Ok((mse, ndcg_value)) => {
                for (metric, value) in [("causal_mse", mse), ("causal_ndcg", ndcg_value)] {
                    rows.push(SweepRow {
                        gamma_theta: point.gamma_theta,
                        gamma_y: point.gamma_y,
                        method: method.name().to_owned(),
                        metric: metric.to_owned(),
                        run,
                        value,
                    });
                }
            }
            Err(err) => failures.push(describe(method, &err)),
        }
    }
    (rows, failures)
}

/// Fits one method on the world's observed ratings (80/20 split, trained
/// on the 80% fold, mirroring how the pipeline treats real data) and
/// returns its exact causal MSE and NDCG.
fn evaluate_method(world: &SimWorld, method: &SweepMethod, seed: u64) -> Result<(f64, f64)> {
    let spec = match method {
        SweepMethod::Oracle => {
            let oracle = |u: usize, i: usize| world.potential.get(u, i);
            let mse = causal_error(world, oracle, CausalLoss::Mse);
            let ndcg_value = causal_error(world, oracle, CausalLoss::Ndcg);
            return Ok((mse, ndcg_value));
        }
        SweepMethod::Model(spec) => spec,
    };

    let bundle = split(
        &world.observed,
        &SplitSpec {
            mode: SplitMode::TrainVal8020,
            seed,
            ..SplitSpec::default()
        },
    )?;
    let train = &bundle.train;

    let sub = match spec.outcome.correction {
        Correction::Deconfounded => {
            let posterior = fit_pf(&train.binarized(), &spec.pf)?;
            Some(compute_substitute(&posterior))
        }
        _ => None,
    };
    let propensities: Option<Vec<f64>> = match spec.outcome.correction {
        Correction::Ipw => {
            let model = fit_propensity(train, &spec.propensity)?;
            Some(train.entries().iter().map(|e| model.propensity(e.value)).collect())
        }
        _ => None,
    };

    let model = fit_outcome(train, sub.as_ref(), propensities.as_deref(), &spec.outcome)?;
    let predict = |u: usize, i: usize| {
        predict_existing(&model, sub.as_ref(), u, i).expect("indices from the world are in range")
    };
    let mse = causal_error(world, predict, CausalLoss::Mse);
    let ndcg_value = causal_error(world, predict, CausalLoss::Ndcg);
    Ok((mse, ndcg_value))
}

/// Groups rows by (grid point, method, metric) in first-appearance order
/// and reduces each group to its mean and standard error of the mean
/// (zero when the group holds a single run).
#[must_use]
pub fn aggregate(rows: &[SweepRow]) -> Vec<SweepAggregate> {
    let mut order: Vec<(f64, f64, String, String)> = Vec::new();
    let mut groups: Vec<Vec<f64>> = Vec::new();
    for row in rows {
        let key = (
            row.gamma_theta,
            row.gamma_y,
            row.method.clone(),
            row.metric.clone(),
        );
        match order.iter().position(|k| *k == key) {
            Some(pos) => groups[pos].push(row.value),
            None => {
                order.push(key);
                groups.push(vec![row.value]);
            }
        }
    }
    order
        .into_iter()
        .zip(groups)
        .map(|((gamma_theta, gamma_y, method, metric), values)| {
            let n = values.len();
            let mean = values.iter().sum::<f64>() / n as f64;
            let stderr = if n < 2 {
                0.0
            } else {
                let var =
                    values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
                (var / n as f64).sqrt()
            };
            SweepAggregate {
                gamma_theta,
                gamma_y,
                method,
                metric,
                runs: n,
                mean,
                stderr,
            }
        })
        .collect()
}

/// Writes per-run sweep rows as CSV (`gamma_theta,gamma_y,method,metric,run,value`).
pub fn write_sweep_rows(rows: &[SweepRow], path: impl AsRef<std::path::Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("gamma_theta,gamma_y,method,metric,run,value\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{:.17e}\n",
            r.gamma_theta, r.gamma_y, r.method, r.metric, r.run, r.value
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Writes aggregated sweep cells as CSV
/// (`gamma_theta,gamma_y,method,metric,runs,mean,stderr`).
pub fn write_sweep_aggregates(
    aggregates: &[SweepAggregate],
    path: impl AsRef<std::path::Path>,
) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("gamma_theta,gamma_y,method,metric,runs,mean,stderr\n");
    for a in aggregates {
        out.push_str(&format!(
            "{},{},{},{},{},{:.17e},{:.17e}\n",
            a.gamma_theta, a.gamma_y, a.method, a.metric, a.runs, a.mean, a.stderr
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}
