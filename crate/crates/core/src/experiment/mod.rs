//! Configuration-driven experiment orchestration.
//!
//! One call runs the whole pipeline: acquire ratings (simulated or loaded),
//! split them into folds, fit every requested method over a hyperparameter
//! grid, select each method's grid point by validation NDCG, evaluate the
//! selected fit on the test fold, and emit CSV/manifest artifacts. Methods
//! and grid points execute in a work pool, but results are reduced in
//! config order and every fit is seeded, so a config determines its
//! results table — and its `results.csv` bytes — exactly.
//!
//! A failed fit is recorded in [`ResultsTable::failures`] and the other
//! methods proceed. Training reads are instrumented: every fitting
//! routine tallies how many training entries of each user it consumed, so
//! a run can prove that held-out users never influenced any fit.

pub mod config;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Instant;

use rayon::prelude::*;

pub use config::{
    apply_override, canonical_text, config_hash, parse_experiment_config, EvalSpec,
    ExperimentConfig, FileSourceSpec, GridSpec, MethodSpec, OutcomeKnobs, PfKnobs, SourceKind,
    SplitChoice,
};

use crate::data::{load_delimited, split, Dataset, DatasetBundle, SplitMode, SplitSpec, TestKind};
use crate::data::SparseInteractions;
use crate::error::{Error, Result};
use crate::ipw::fit_propensity;
use crate::metrics::{self, RankedList};
use crate::outcome::{
    fit_outcome, predict_existing, predict_new_user, Correction, NewUserData, OutcomeModel,
    PredictionRequest, RequestUser,
};
use crate::pf::{compute_substitute, fit_pf, PFPosterior, SubstituteConfounder};
use crate::sim::{self, SimConfig, SimWorld};

/// One hyperparameter grid point and its validation score.
///
/// `pf_k` is the exposure-model dimension; it is `None` for methods that
/// fit no exposure model.
#[derive(Debug, Clone, PartialEq)]
pub struct GridScore {
    pub outcome_k: usize,
    pub prior_std: f64,
    pub pf_k: Option<usize>,
    pub validation_ndcg: f64,
}

/// Final test metrics for one method, as one `results.csv` row.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub method: String,
    pub correction: String,
    /// The grid point that won on validation; `None` for the oracle,
    /// which fits nothing.
    pub selected: Option<GridScore>,
    pub ndcg: f64,
    pub recall: f64,
    pub mse: f64,
    pub mae: f64,
    pub per_item_mse: f64,
    pub per_item_mae: f64,
}

/// One test-fold prediction, kept for the per-method dump.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRecord {
    pub user: u32,
    pub item: u32,
    pub actual: f64,
    pub predicted: f64,
}

/// Everything retained about one completed method.
#[derive(Debug, Clone)]
pub struct MethodResult {
    pub row: ResultRow,
    /// Every evaluated grid point, in sweep order.
    pub grid_scores: Vec<GridScore>,
    /// Index into `grid_scores` of the selected point (`None` for the
    /// oracle).
    pub selected_index: Option<usize>,
    pub predictions: Vec<PredictionRecord>,
}

/// A completed experiment: one entry per method that finished, plus run
/// metadata.
#[derive(Debug, Clone)]
pub struct ResultsTable {
    /// Completed methods, in config order.
    pub results: Vec<MethodResult>,
    /// `method/correction: error` lines for methods that failed.
    pub failures: Vec<String>,
    pub seed: u64,
    pub config_hash: String,
    /// Canonical config text, embedded in the manifest for reproduction.
    pub config_text: String,
    pub wall_time_s: f64,
    /// Per-user count of training entries consumed across every fit in the
    /// run. Held-out users must sit at zero.
    pub training_entry_uses: Vec<u64>,
    pub holdout_users: Vec<u32>,
    /// Raw external ids, indexed by internal user/item index.
    pub user_ids: Vec<i64>,
    pub item_ids: Vec<i64>,
}

type PfFit = std::result::Result<(PFPosterior, SubstituteConfounder), String>;

/// Adds each user's training-entry count to the usage counter; called
/// once per fitting routine that reads `m`.
fn tally(uses: &[AtomicU64], m: &SparseInteractions) {
    for (u, slot) in uses.iter().enumerate() {
        let n = m.row(u).len() as u64;
        if n > 0 {
            slot.fetch_add(n, Ordering::Relaxed);
        }
    }
}

struct RunContext<'a> {
    cfg: &'a ExperimentConfig,
    bundle: &'a DatasetBundle,
    world: Option<&'a SimWorld>,
    holdout: &'a HashSet<u32>,
    propensities: Option<&'a std::result::Result<Vec<f64>, String>>,
    pf_cache: &'a BTreeMap<usize, PfFit>,
    uses: &'a [AtomicU64],
}

/// Runs the full pipeline described by `cfg` and returns the table.
///
/// Steps, per fitted method: fit the exposure model on binarized training
/// exposures (shared across methods, skipped unless some method is
/// deconfounded), compute the substitute, fit the outcome model at every
/// grid point, keep the point with the best validation NDCG, and evaluate
/// that fit on the test fold — existing users through direct prediction,
/// held-out users through exposure fold-in plus a per-user refit on their
/// revealed ratings. Propensities are likewise fit once and shared by the
/// inverse-propensity methods. The oracle method reads the simulated
/// potential outcomes and fits nothing.
///
/// A method whose fit or evaluation fails (diverged optimizer, non-finite
/// test metric, …) lands in [`ResultsTable::failures`]; the rest proceed.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ResultsTable> {
    cfg.validate()?;
    let start = Instant::now();

    let (mut dataset, world) = match cfg.source {
        SourceKind::Simulate => {
            let sim_cfg = SimConfig {
                seed: cfg.seed,
                ..cfg.sim.clone()
            };
            let world = sim::generate(&sim_cfg)?;
            (Dataset::from_matrix(world.observed.clone()), Some(world))
        }
        SourceKind::File => {
            let path = cfg.data.path.as_ref().expect("checked by validate");
            (load_delimited(path, &cfg.data.load_options())?, None)
        }
    };

    // An attached randomized test set joins the base id universe before
    // the split so fold indices and test indices agree.
    let provided = match &cfg.data.test_path {
        Some(p) => {
            let test = load_delimited(p, &cfg.data.load_options())?;
            Some(dataset.align_other(&test)?)
        }
        None => None,
    };

    let spec = SplitSpec {
        mode: if provided.is_some() {
            SplitMode::ProvidedRandomTest
        } else {
            cfg.split.mode
        },
        seed: cfg.seed,
        strong_generalization_holdout: cfg.split.holdout_fraction,
        fold_in_fraction: cfg.split.fold_in_fraction,
    };
    let mut bundle = split(&dataset.matrix, &spec)?;
    if let Some((aligned, new_users)) = provided {
        for e in aligned.entries() {
            if dataset.matrix.contains(e.user, e.item) {
                return Err(Error::OverlappingEntry {
                    user: e.user,
                    item: e.item,
                });
            }
        }
        if !new_users.is_empty() {
            log::warn!(
                "{} randomized-test users have no base-set interactions",
                new_users.len()
            );
        }
        bundle.test = aligned;
        bundle.test_kind = TestKind::Randomized;
        bundle.new_test_only_users = new_users;
    }

    let uses: Vec<AtomicU64> = (0..bundle.train.n_users())
        .map(|_| AtomicU64::new(0))
        .collect();

    let needs_ipw = cfg.methods.iter().any(|m| {
        matches!(
            m,
            MethodSpec::Fit {
                correction: Correction::Ipw,
                ..
            }
        )
    });
    let needs_deconf = cfg.methods.iter().any(|m| {
        matches!(
            m,
            MethodSpec::Fit {
                correction: Correction::Deconfounded,
                ..
            }
        )
    });

    // Shared prefits. Failures are stored, not raised: only the methods
    // that need the failed artifact should fail.
    let propensities: Option<std::result::Result<Vec<f64>, String>> = if needs_ipw {
        tally(&uses, &bundle.train);
        Some(
            fit_propensity(&bundle.train, &cfg.propensity)
                .map(|m| {
                    bundle
                        .train
                        .entries()
                        .iter()
                        .map(|e| m.propensity(e.value))
                        .collect()
                })
                .map_err(|e| e.to_string()),
        )
    } else {
        None
    };

    let mut pf_cache: BTreeMap<usize, PfFit> = BTreeMap::new();
    if needs_deconf {
        let binary = bundle.train.binarized();
        for &pf_k in &cfg.grid.pf_k {
            if pf_cache.contains_key(&pf_k) {
                continue;
            }
            tally(&uses, &bundle.train);
            let fit = fit_pf(&binary, &cfg.pf_config(pf_k))
                .map(|post| {
                    let sub = compute_substitute(&post);
                    (post, sub)
                })
                .map_err(|e| e.to_string());
            pf_cache.insert(pf_k, fit);
        }
    }

    let holdout: HashSet<u32> = bundle.holdout_users.iter().copied().collect();
    let ctx = RunContext {
        cfg,
        bundle: &bundle,
        world: world.as_ref(),
        holdout: &holdout,
        propensities: propensities.as_ref(),
        pf_cache: &pf_cache,
        uses: &uses,
    };

    let outcomes: Vec<(MethodSpec, Result<MethodResult>)> = cfg
        .methods
        .par_iter()
        .map(|&m| (m, evaluate_method(&ctx, m)))
        .collect();

    let mut results = Vec::new();
    let mut failures = Vec::new();
    for (m, r) in outcomes {
        match r {
            Ok(res) => results.push(res),
            Err(e) => failures.push(format!("{}: {e}", m.token())),
        }
    }

    Ok(ResultsTable {
        results,
        failures,
        seed: cfg.seed,
        config_hash: config_hash(cfg),
        config_text: canonical_text(cfg),
        wall_time_s: start.elapsed().as_secs_f64(),
        training_entry_uses: uses.iter().map(|a| a.load(Ordering::Relaxed)).collect(),
        holdout_users: bundle.holdout_users.clone(),
        user_ids: dataset.user_ids.clone(),
        item_ids: dataset.item_ids.clone(),
    })
}

fn evaluate_method(ctx: &RunContext<'_>, spec: MethodSpec) -> Result<MethodResult> {
    let (cfg, bundle) = (ctx.cfg, ctx.bundle);
    let (variant, correction) = match spec {
        MethodSpec::Oracle => {
            let world = ctx
                .world
                .ok_or_else(|| Error::invalid("the oracle method needs a simulated world"))?;
            let (m, predictions) = score_test(cfg, bundle, |u, items| {
                if u as usize >= world.n_users() {
                    return Err(Error::invalid(format!(
                        "user {u} lies outside the simulated world"
                    )));
                }
                items
                    .iter()
                    .map(|&i| {
                        if (i as usize) < world.n_items() {
                            Ok(world.potential.get(u as usize, i as usize))
                        } else {
                            Err(Error::invalid(format!(
                                "item {i} lies outside the simulated world"
                            )))
                        }
                    })
                    .collect()
            })?;
            return Ok(MethodResult {
                row: m.into_row("oracle".into(), "-".into(), None),
                grid_scores: Vec::new(),
                selected_index: None,
                predictions,
            });
        }
        MethodSpec::Fit {
            variant,
            correction,
        } => (variant, correction),
    };

    let props: Option<&[f64]> = match (correction, ctx.propensities) {
        (Correction::Ipw, Some(Ok(p))) => Some(p.as_slice()),
        (Correction::Ipw, Some(Err(msg))) => {
            return Err(Error::invalid(format!("propensity fit failed: {msg}")))
        }
        (Correction::Ipw, None) => {
            unreachable!("propensities are prefit whenever an IPW method runs")
        }
        _ => None,
    };

    let lookup_pf = |pf_k: Option<usize>| -> Result<Option<&(PFPosterior, SubstituteConfounder)>> {
        match pf_k {
            None => Ok(None),
            Some(k) => match ctx.pf_cache.get(&k).expect("prefit covers the grid") {
                Ok(pair) => Ok(Some(pair)),
                Err(msg) => Err(Error::invalid(format!(
                    "exposure model fit failed at k = {k}: {msg}"
                ))),
            },
        }
    };

    // The exposure-dimension axis only applies to methods that use one.
    let pf_axis: Vec<Option<usize>> = if correction == Correction::Deconfounded {
        cfg.grid.pf_k.iter().map(|&k| Some(k)).collect()
    } else {
        vec![None]
    };
    let mut points = Vec::new();
    for &outcome_k in &cfg.grid.outcome_k {
        for &prior_std in &cfg.grid.prior_std {
            for &pf_k in &pf_axis {
                points.push((outcome_k, prior_std, pf_k));
            }
        }
    }

    let fits: Vec<Result<(GridScore, OutcomeModel)>> = points
        .par_iter()
        .map(|&(outcome_k, prior_std, pf_k)| {
            let sub = lookup_pf(pf_k)?.map(|(_, sub)| sub);
            let ocfg = cfg.outcome_config(variant, correction, outcome_k, prior_std);
            tally(ctx.uses, &bundle.train);
            let model = fit_outcome(&bundle.train, sub, props, &ocfg)?;
            let score = validation_ndcg(cfg, bundle, &model, sub)?;
            Ok((
                GridScore {
                    outcome_k,
                    prior_std,
                    pf_k,
                    validation_ndcg: score,
                },
                model,
            ))
        })
        .collect();

    // Reduce in sweep order: strictly-better wins, so ties keep the
    // earliest point and the scan is deterministic.
    let mut grid_scores = Vec::with_capacity(fits.len());
    let mut best: Option<(usize, f64, OutcomeModel)> = None;
    for (i, fit) in fits.into_iter().enumerate() {
        let (score, model) = fit?;
        let clean = if score.validation_ndcg.is_finite() {
            score.validation_ndcg
        } else {
            f64::NEG_INFINITY
        };
        grid_scores.push(score);
        let better = match &best {
            None => true,
            Some((_, b, _)) => clean > *b,
        };
        if better {
            best = Some((i, clean, model));
        }
    }
    let (best_idx, best_clean, model) = best.expect("validated grid is nonempty");
    if best_clean == f64::NEG_INFINITY {
        log::warn!(
            "{}: every validation score was non-finite; keeping the first grid point",
            spec.token()
        );
    }
    let chosen = grid_scores[best_idx].clone();
    let ocfg = cfg.outcome_config(variant, correction, chosen.outcome_k, chosen.prior_std);
    let selected_pair = lookup_pf(chosen.pf_k)?;
    let selected_pf = selected_pair.map(|(post, _)| post);
    let selected_sub = selected_pair.map(|(_, sub)| sub);

    let (m, predictions) = score_test(cfg, bundle, |u, items| {
        if ctx.holdout.contains(&u) {
            // Held out from training: infer exposure factors from the
            // fold-in interactions, refit user factors on the revealed
            // ratings, and predict with the trained item side frozen.
            let fold_row = bundle.fold_in.row(u as usize);
            let data = NewUserData {
                exposures: fold_row.iter().map(|e| (e.item, 1.0)).collect(),
                ratings: fold_row.iter().map(|e| (e.item, e.value)).collect(),
            };
            let req = PredictionRequest {
                user: RequestUser::New(data),
                items: items.to_vec(),
            };
            Ok(predict_new_user(&model, selected_pf, &req, &ocfg)?.values)
        } else {
            items
                .iter()
                .map(|&i| predict_existing(&model, selected_sub, u as usize, i as usize))
                .collect()
        }
    })?;

    Ok(MethodResult {
        row: m.into_row(variant.to_string(), correction.to_string(), Some(chosen)),
        grid_scores,
        selected_index: Some(best_idx),
        predictions,
    })
}

/// Mean NDCG over validation users under the fitted model.
fn validation_ndcg(
    cfg: &ExperimentConfig,
    bundle: &DatasetBundle,
    model: &OutcomeModel,
    sub: Option<&SubstituteConfounder>,
) -> Result<f64> {
    let mut lists = Vec::new();
    for u in 0..bundle.validation.n_users() {
        let row = bundle.validation.row(u);
        if row.is_empty() {
            continue;
        }
        let mut scored = Vec::with_capacity(row.len());
        for e in row {
            scored.push((
                e.item,
                predict_existing(model, sub, u, e.item as usize)?,
                e.value,
            ));
        }
        lists.push(RankedList::from_scored(u as u32, scored));
    }
    Ok(metrics::ndcg(&lists, cfg.eval.gain))
}

struct TestMetrics {
    ndcg: f64,
    recall: f64,
    mse: f64,
    mae: f64,
    per_item_mse: f64,
    per_item_mae: f64,
}

impl TestMetrics {
    fn into_row(
        self,
        method: String,
        correction: String,
        selected: Option<GridScore>,
    ) -> ResultRow {
        ResultRow {
            method,
            correction,
            selected,
            ndcg: self.ndcg,
            recall: self.recall,
            mse: self.mse,
            mae: self.mae,
            per_item_mse: self.per_item_mse,
            per_item_mae: self.per_item_mae,
        }
    }
}

/// Evaluates a per-user predictor over the test fold.
///
/// Every metric must come out finite, otherwise the method is treated as
/// failed; an empty test fold is likewise an error.
fn score_test(
    cfg: &ExperimentConfig,
    bundle: &DatasetBundle,
    mut predict_user: impl FnMut(u32, &[u32]) -> Result<Vec<f64>>,
) -> Result<(TestMetrics, Vec<PredictionRecord>)> {
    if bundle.test.is_empty() {
        return Err(Error::invalid("the test fold is empty; nothing to evaluate"));
    }
    let (lo, hi) = bundle.rating_scale;
    let mut lists = Vec::new();
    let mut predicted = Vec::with_capacity(bundle.test.nnz());
    let mut actual = Vec::with_capacity(bundle.test.nnz());
    let mut records = Vec::with_capacity(bundle.test.nnz());
    for u in 0..bundle.test.n_users() {
        let row = bundle.test.row(u);
        if row.is_empty() {
            continue;
        }
        let items: Vec<u32> = row.iter().map(|e| e.item).collect();
        let values = predict_user(u as u32, &items)?;
        debug_assert_eq!(values.len(), items.len());
        let mut scored = Vec::with_capacity(row.len());
        for (e, &raw) in row.iter().zip(&values) {
            let p = if cfg.eval.clip_predictions {
                raw.clamp(lo, hi)
            } else {
                raw
            };
            scored.push((e.item, p, e.value));
            predicted.push(p);
            actual.push(e.value);
            records.push(PredictionRecord {
                user: u as u32,
                item: e.item,
                actual: e.value,
                predicted: p,
            });
        }
        lists.push(RankedList::from_scored(u as u32, scored));
    }

    let by_pair: HashMap<(u32, u32), f64> = records
        .iter()
        .map(|r| ((r.user, r.item), r.predicted))
        .collect();
    let per_item = metrics::per_item_accuracy(&bundle.test, |u, i| by_pair[&(u, i)]);
    let m = TestMetrics {
        ndcg: metrics::ndcg(&lists, cfg.eval.gain),
        recall: metrics::recall_at_k(&lists, cfg.eval.recall_k, cfg.eval.relevance_threshold),
        mse: metrics::mse(&predicted, &actual),
        mae: metrics::mae(&predicted, &actual),
        per_item_mse: per_item.mse,
        per_item_mae: per_item.mae,
    };
    for (name, v) in [
        ("ndcg", m.ndcg),
        ("recall", m.recall),
        ("mse", m.mse),
        ("mae", m.mae),
        ("per_item_mse", m.per_item_mse),
        ("per_item_mae", m.per_item_mae),
    ] {
        if !v.is_finite() {
            return Err(Error::invalid(format!("test {name} is not finite ({v})")));
        }
    }
    Ok((m, records))
}

const RESULTS_HEADER: &str =
    "method,correction,outcome_k,prior_std,pf_k,validation_ndcg,ndcg,recall,mse,mae,per_item_mse,per_item_mae";
const GRID_HEADER: &str = "method,correction,outcome_k,prior_std,pf_k,validation_ndcg,selected";

/// Fixed-width scientific float field: 17 fractional digits round-trip any
/// finite `f64` exactly, and the fixed format keeps reruns byte-identical.
fn float_field(v: f64) -> String {
    format!("{v:.17e}")
}

/// Renders result rows as CSV text (the `results.csv` payload).
#[must_use]
pub fn render_results_csv(rows: &[ResultRow]) -> String {
    let mut out = String::from(RESULTS_HEADER);
    out.push('\n');
    for r in rows {
        let (k, std, pfk, vnd) = match &r.selected {
            Some(c) => (
                c.outcome_k.to_string(),
                float_field(c.prior_std),
                c.pf_k.map(|k| k.to_string()).unwrap_or_default(),
                float_field(c.validation_ndcg),
            ),
            None => Default::default(),
        };
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.method,
            r.correction,
            k,
            std,
            pfk,
            vnd,
            float_field(r.ndcg),
            float_field(r.recall),
            float_field(r.mse),
            float_field(r.mae),
            float_field(r.per_item_mse),
            float_field(r.per_item_mae),
        ));
    }
    out
}

/// Reads a `results.csv` back into rows; exact for every finite value.
pub fn read_results_csv(path: impl AsRef<Path>) -> Result<Vec<ResultRow>> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(&display, e))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == RESULTS_HEADER => {}
        other => {
            return Err(Error::Parse {
                path: display,
                line: 1,
                message: format!(
                    "expected the results header, found {:?}",
                    other.map(|(_, h)| h).unwrap_or("")
                ),
            })
        }
    }
    let mut rows = Vec::new();
    for (idx, line) in lines {
        if line.is_empty() {
            continue;
        }
        let line_no = idx + 1;
        let perr = |message: String| Error::Parse {
            path: display.clone(),
            line: line_no,
            message,
        };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 12 {
            return Err(perr(format!("expected 12 fields, found {}", f.len())));
        }
        let fl = |s: &str, what: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| perr(format!("{what}: {s:?} is not a number")))
        };
        let selected = if f[2].is_empty() {
            for (i, name) in [(3, "prior_std"), (4, "pf_k"), (5, "validation_ndcg")] {
                if !f[i].is_empty() {
                    return Err(perr(format!("{name} set without an outcome_k")));
                }
            }
            None
        } else {
            Some(GridScore {
                outcome_k: f[2]
                    .parse()
                    .map_err(|_| perr(format!("outcome_k: {:?} is not a count", f[2])))?,
                prior_std: fl(f[3], "prior_std")?,
                pf_k: if f[4].is_empty() {
                    None
                } else {
                    Some(
                        f[4].parse()
                            .map_err(|_| perr(format!("pf_k: {:?} is not a count", f[4])))?,
                    )
                },
                validation_ndcg: fl(f[5], "validation_ndcg")?,
            })
        };
        rows.push(ResultRow {
            method: f[0].into(),
            correction: f[1].into(),
            selected,
            ndcg: fl(f[6], "ndcg")?,
            recall: fl(f[7], "recall")?,
            mse: fl(f[8], "mse")?,
            mae: fl(f[9], "mae")?,
            per_item_mse: fl(f[10], "per_item_mse")?,
            per_item_mae: fl(f[11], "per_item_mae")?,
        });
    }
    Ok(rows)
}

fn render_grid_scores(results: &[MethodResult]) -> String {
    let mut out = String::from(GRID_HEADER);
    out.push('\n');
    for m in results {
        for (i, s) in m.grid_scores.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                m.row.method,
                m.row.correction,
                s.outcome_k,
                float_field(s.prior_std),
                s.pf_k.map(|k| k.to_string()).unwrap_or_default(),
                float_field(s.validation_ndcg),
                u8::from(Some(i) == m.selected_index),
            ));
        }
    }
    out
}

fn prediction_file_name(row: &ResultRow) -> String {
    if row.method == "oracle" {
        "predictions_oracle.csv".into()
    } else {
        format!("predictions_{}_{}.csv", row.method, row.correction)
    }
}

fn render_predictions(m: &MethodResult, user_ids: &[i64], item_ids: &[i64]) -> String {
    let mut out = String::from("user,item,actual,predicted\n");
    for p in &m.predictions {
        out.push_str(&format!(
            "{},{},{},{}\n",
            user_ids[p.user as usize],
            item_ids[p.item as usize],
            float_field(p.actual),
            float_field(p.predicted),
        ));
    }
    out
}

fn render_manifest(table: &ResultsTable, files: &[String]) -> Result<String> {
    let value = serde_json::json!({
        "config_hash": table.config_hash,
        "config": table.config_text,
        "seed": table.seed,
        "version": env!("CARGO_PKG_VERSION"),
        "wall_time_s": table.wall_time_s,
        "failures": table.failures,
        "files": files,
    });
    serde_json::to_string_pretty(&value)
        .map(|mut s| {
            s.push('\n');
            s
        })
        .map_err(|e| Error::invalid(format!("manifest serialization failed: {e}")))
}

/// Writes the run's artifacts into `dir` and returns the written paths.
///
/// Emits `results.csv`, `grid_scores.csv`, one `predictions_*.csv` per
/// method, and `manifest.json` (config hash + canonical text, seed,
/// version, wall time, failures, file list). `results.csv` depends only on
/// the fitted numbers, so identical configs produce byte-identical files;
/// wall time lives in the manifest alone. A table with no completed
/// methods is rejected before anything is written, and any write failure
/// removes the files already written.
pub fn emit_outputs(table: &ResultsTable, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    if table.results.is_empty() {
        return Err(Error::invalid(
            "no method completed; refusing to write an empty results table",
        ));
    }

    let rows: Vec<ResultRow> = table.results.iter().map(|m| m.row.clone()).collect();
    let mut files: Vec<(String, String)> = vec![
        ("results.csv".into(), render_results_csv(&rows)),
        ("grid_scores.csv".into(), render_grid_scores(&table.results)),
    ];
    for m in &table.results {
        files.push((
            prediction_file_name(&m.row),
            render_predictions(m, &table.user_ids, &table.item_ids),
        ));
    }
    let mut names: Vec<String> = files.iter().map(|(n, _)| n.clone()).collect();
    names.push("manifest.json".into());
    files.push(("manifest.json".into(), render_manifest(table, &names)?));

    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let mut written: Vec<PathBuf> = Vec::new();
    for (name, content) in &files {
        let path = dir.join(name);
        if let Err(e) = std::fs::write(&path, content) {
            let err = Error::io(path.display().to_string(), e);
            for p in &written {
                let _ = std::fs::remove_file(p);
            }
            return Err(err);
        }
        written.push(path);
    }
    Ok(written)
}
