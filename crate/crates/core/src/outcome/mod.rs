//! Outcome models: regularized matrix factorization over ratings, with an
//! optional exposure-derived correction term.
//!
//! Three likelihood variants (probabilistic Gaussian, confidence-weighted
//! Gaussian, Poisson counts) cross three corrections (none, the
//! substitute-confounder adjustment `gamma_u * a_hat_ui + beta_0`, and
//! inverse-propensity weighting). All are fit by maximum a posteriori
//! estimation with full-batch gradient descent on the negative log
//! posterior. The learning rate is fixed; each parameter block's step is
//! normalized by the number of likelihood terms touching that block so
//! that one rate serves blocks whose curvature differs by orders of
//! magnitude (the intercept sees U*I terms, a user factor sees at most I).
//! The normalization is a constant positive rescaling per block, so fixed
//! points of the objective are unchanged.

mod objective;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::SparseInteractions;
use crate::error::{Error, Result};
use crate::matrix::{dot, Matrix};
use crate::pf::{fold_in_user, PFPosterior, SubstituteConfounder};

pub use objective::mean_fn;
use objective::{Gradients, ObjectiveContext, Params};

/// Likelihood family for the ratings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Gaussian with mean `a * theta.beta`: unexposed pairs carry no
    /// signal about the factors.
    Probabilistic,
    /// Gaussian with mean `theta.beta` and confidence weights
    /// `1 + alpha * y` on exposed pairs, 1 elsewhere.
    Weighted,
    /// Poisson counts with mean-parameterized rate `theta.beta`.
    Poisson,
}

/// Which bias adjustment the objective carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Correction {
    None,
    /// Adds `gamma_u * a_hat_ui + beta_0` to every pair's mean, with
    /// unexposed pairs entering at the observed convention `y = 0`.
    Deconfounded,
    /// Weights each exposed pair by its inverse propensity and drops
    /// unexposed pairs.
    Ipw,
}

/// How the count variant keeps its rate positive.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoissonLink {
    /// `max(1e-6, eta)`, gradient zeroed through the clamp.
    Clamp,
    /// `ln(1 + exp(eta))`.
    Softplus,
}

macro_rules! enum_text {
    ($ty:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        impl std::fmt::Display for $ty {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                f.write_str(match self { $($ty::$variant => $text),+ })
            }
        }
        impl std::str::FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($ty::$variant),)+
                    other => Err(Error::InvalidConfig(format!(
                        concat!("unknown ", stringify!($ty), " {:?}"), other
                    ))),
                }
            }
        }
    };
}

enum_text!(Variant {
    Probabilistic => "probabilistic",
    Weighted => "weighted",
    Poisson => "poisson",
});
enum_text!(Correction {
    None => "none",
    Deconfounded => "deconfounded",
    Ipw => "ipw",
});
enum_text!(PoissonLink {
    Clamp => "clamp",
    Softplus => "softplus",
});

/// Priors and fitting controls for an outcome model.
#[derive(Debug, Clone, PartialEq)]
pub struct OutcomeConfig {
    pub variant: Variant,
    pub correction: Correction,
    /// Latent dimension of the factors.
    pub k: usize,
    pub prior_std_theta_beta: f64,
    pub prior_std_gamma: f64,
    pub prior_std_intercept: f64,
    /// Gaussian observation variance (ignored by the count variant).
    pub sigma2: f64,
    /// Confidence slope for the weighted variant.
    pub alpha_weight: f64,
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// Stop when the relative objective change drops below this.
    pub tol: f64,
    pub seed: u64,
    /// Whether the deconfounded correction carries a free intercept.
    pub fit_intercept: bool,
    pub poisson_link: PoissonLink,
}

impl Default for OutcomeConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Probabilistic,
            correction: Correction::None,
            k: 10,
            prior_std_theta_beta: 1.0,
            prior_std_gamma: 1.0,
            prior_std_intercept: 1.0,
            sigma2: 1.0,
            alpha_weight: 40.0,
            learning_rate: 0.01,
            max_epochs: 500,
            tol: 1e-6,
            seed: 0,
            fit_intercept: true,
            poisson_link: PoissonLink::Clamp,
        }
    }
}

impl OutcomeConfig {
    pub(crate) fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(Error::InvalidConfig("latent dimension must be >= 1".into()));
        }
        for (name, v) in [
            ("prior_std_theta_beta", self.prior_std_theta_beta),
            ("prior_std_gamma", self.prior_std_gamma),
            ("prior_std_intercept", self.prior_std_intercept),
            ("sigma2", self.sigma2),
            ("alpha_weight", self.alpha_weight),
            ("learning_rate", self.learning_rate),
            ("tol", self.tol),
        ] {
            if !(v > 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        if self.max_epochs < 1 {
            return Err(Error::InvalidConfig("max_epochs must be >= 1".into()));
        }
        Ok(())
    }
}

/// A fitted outcome model.
#[derive(Debug, Clone)]
pub struct OutcomeModel {
    pub cfg: OutcomeConfig,
    /// U x K user factors.
    pub theta: Matrix,
    /// I x K item factors.
    pub beta: Matrix,
    /// Per-user confounder coefficients; identically zero unless the
    /// correction is deconfounded.
    pub gamma: Vec<f64>,
    /// Shared intercept; zero unless deconfounded with `fit_intercept`.
    pub intercept: f64,
    /// Negative log posterior before training, then after each epoch.
    pub objective_trace: Vec<f64>,
    /// Smallest rate the count likelihood saw across the whole fit.
    pub min_poisson_rate: Option<f64>,
}

impl OutcomeModel {
    #[must_use]
    pub fn n_users(&self) -> usize {
        self.theta.rows()
    }

    #[must_use]
    pub fn n_items(&self) -> usize {
        self.beta.rows()
    }
}

/// Identifies whose predictions are requested.
#[derive(Debug, Clone)]
pub enum RequestUser {
    /// A user the model was trained on.
    Existing(u32),
    /// A user unseen at training time.
    New(NewUserData),
}

/// Sparse history of a user unseen at training time. Exposure counts feed
/// the exposure-model fold-in; the rated items (which in this data regime
/// are exactly the exposed ones) anchor the new user's outcome factors.
#[derive(Debug, Clone, Default)]
pub struct NewUserData {
    pub exposures: Vec<(u32, f64)>,
    pub ratings: Vec<(u32, f64)>,
}

#[derive(Debug, Clone)]
pub struct PredictionRequest {
    pub user: RequestUser,
    pub items: Vec<u32>,
}

/// Predictions for a folded-in user, with the inferred factors attached.
#[derive(Debug, Clone)]
pub struct NewUserPrediction {
    pub values: Vec<f64>,
    /// True when the user supplied no ratings, in which case the factors
    /// sit at their prior mode and every prediction is the intercept.
    pub prior_fallback: bool,
    pub theta: Vec<f64>,
    pub gamma: f64,
}

/// Fits an outcome model on the training ratings.
///
/// `sub` is required (and its dimensions must match) exactly when the
/// correction is deconfounded; `propensities` is required, aligned with
/// `train.entries()`, exactly when the correction is IPW.
pub fn fit_outcome(
    train: &SparseInteractions,
    sub: Option<&SubstituteConfounder>,
    propensities: Option<&[f64]>,
    cfg: &OutcomeConfig,
) -> Result<OutcomeModel> {
    cfg.validate()?;
    let ctx = build_context(train, sub, propensities, cfg)?;
    let mut params = init_params(train, cfg, ctx.included_pairs());
    let (trace, min_rate) = minimize(&ctx, &mut params)?;

    Ok(OutcomeModel {
        cfg: cfg.clone(),
        theta: params.theta,
        beta: params.beta,
        gamma: params.gamma,
        intercept: params.intercept,
        objective_trace: trace,
        min_poisson_rate: min_rate,
    })
}

/// Validates the correction's side inputs and assembles the objective
/// context shared by fitting and diagnostics.
fn build_context<'a>(
    train: &'a SparseInteractions,
    sub: Option<&'a SubstituteConfounder>,
    propensities: Option<&[f64]>,
    cfg: &'a OutcomeConfig,
) -> Result<ObjectiveContext<'a>> {
    let (n_users, n_items) = (train.n_users(), train.n_items());
    if n_users == 0 || n_items == 0 {
        return Err(Error::invalid("training matrix must have users and items"));
    }
    if cfg.variant == Variant::Poisson {
        if let Some((lo, _)) = train.value_range() {
            if lo < 0.0 {
                return Err(Error::invalid(
                    "count outcomes require non-negative ratings",
                ));
            }
        }
    }

    let sub = match cfg.correction {
        Correction::Deconfounded => {
            let sub = sub.ok_or_else(|| {
                Error::invalid("deconfounded correction requires a substitute confounder")
            })?;
            if sub.user_means.rows() != n_users || sub.item_means.rows() != n_items {
                return Err(Error::invalid(format!(
                    "substitute dimensions {}x{} do not match training data {n_users}x{n_items}",
                    sub.user_means.rows(),
                    sub.item_means.rows()
                )));
            }
            Some(sub)
        }
        _ => {
            if sub.is_some() {
                log::warn!("substitute confounder supplied but correction is not deconfounded; ignoring");
            }
            None
        }
    };
    let ipw_weights = match cfg.correction {
        Correction::Ipw => {
            let props = propensities.ok_or_else(|| {
                Error::invalid("ipw correction requires per-entry propensities")
            })?;
            if props.len() != train.nnz() {
                return Err(Error::invalid(format!(
                    "got {} propensities for {} training entries",
                    props.len(),
                    train.nnz()
                )));
            }
            let mut weights = Vec::with_capacity(props.len());
            for &p in props {
                if !(p > 0.0) || !p.is_finite() {
                    return Err(Error::invalid(format!("propensity {p} is not positive")));
                }
                weights.push(1.0 / p);
            }
            Some(weights)
        }
        _ => {
            if propensities.is_some() {
                log::warn!("propensities supplied but correction is not ipw; ignoring");
            }
            None
        }
    };

    Ok(ObjectiveContext {
        train,
        sub,
        ipw_weights,
        cfg,
    })
}

/// The fitting objective and its analytic gradients at one parameter
/// point. Blocks mirror [`OutcomeModel`]'s parameters; the value is the
/// negative log posterior up to additive constants.
#[derive(Debug, Clone)]
pub struct ObjectiveReport {
    pub value: f64,
    pub grad_theta: Matrix,
    pub grad_beta: Matrix,
    pub grad_gamma: Vec<f64>,
    pub grad_intercept: f64,
}

/// Evaluates the fitting objective and its gradients at the parameters
/// held by `model`, with exactly the arithmetic the optimizer uses; the
/// side inputs follow the [`fit_outcome`] contract. Useful for optimizer
/// diagnostics such as finite-difference gradient checks.
pub fn objective_at(
    train: &SparseInteractions,
    sub: Option<&SubstituteConfounder>,
    propensities: Option<&[f64]>,
    model: &OutcomeModel,
) -> Result<ObjectiveReport> {
    let cfg = &model.cfg;
    cfg.validate()?;
    if model.theta.rows() != train.n_users()
        || model.beta.rows() != train.n_items()
        || model.gamma.len() != train.n_users()
        || model.theta.cols() != cfg.k
        || model.beta.cols() != cfg.k
    {
        return Err(Error::invalid(format!(
            "model shape ({} users x {} items at k = {}) does not match \
             the training data ({} x {} at k = {})",
            model.theta.rows(),
            model.beta.rows(),
            model.theta.cols(),
            train.n_users(),
            train.n_items(),
            cfg.k,
        )));
    }
    let ctx = build_context(train, sub, propensities, cfg)?;
    let params = Params {
        theta: model.theta.clone(),
        beta: model.beta.clone(),
        gamma: model.gamma.clone(),
        intercept: model.intercept,
    };
    let mut grads = Gradients::zeros_like(&params);
    let (value, _) = ctx.value_and_gradient(&params, &mut grads);
    Ok(ObjectiveReport {
        value,
        grad_theta: grads.theta,
        grad_beta: grads.beta,
        grad_gamma: grads.gamma,
        grad_intercept: grads.intercept,
    })
}

/// Seeded starting point. Factor entries get small uniform jitter (theta
/// first, then beta, both row-major). The count variant instead starts at
/// a positive scale matched to the mean target, because a zero-centered
/// start would put most rates below the clamp where gradients vanish.
/// Gamma and the intercept start at their prior mode, exactly zero.
fn init_params(train: &SparseInteractions, cfg: &OutcomeConfig, n_terms: usize) -> Params {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (n_users, n_items) = (train.n_users(), train.n_items());
    let fill = |rng: &mut ChaCha8Rng, rows: usize, f: &dyn Fn(&mut ChaCha8Rng) -> f64| {
        Matrix::from_fn(rows, cfg.k, |_, _| f(rng))
    };
    let (theta, beta) = match cfg.variant {
        Variant::Probabilistic | Variant::Weighted => {
            let jitter = |rng: &mut ChaCha8Rng| rng.gen_range(-0.1..0.1);
            (
                fill(&mut rng, n_users, &jitter),
                fill(&mut rng, n_items, &jitter),
            )
        }
        Variant::Poisson => {
            let total: f64 = train.entries().iter().map(|e| e.value).sum();
            let mean = (total / n_terms.max(1) as f64).max(1e-3);
            let scale = (mean / cfg.k as f64).sqrt();
            let jitter = |rng: &mut ChaCha8Rng| scale * rng.gen_range(0.9..1.1);
            (
                fill(&mut rng, n_users, &jitter),
                fill(&mut rng, n_items, &jitter),
            )
        }
    };
    Params {
        theta,
        beta,
        gamma: vec![0.0; n_users],
        intercept: 0.0,
    }
}

/// Full-batch gradient descent with per-block step normalization. Returns
/// the objective trace (initial value, then one per epoch) and the
/// smallest Poisson rate seen.
fn minimize(ctx: &ObjectiveContext, params: &mut Params) -> Result<(Vec<f64>, Option<f64>)> {
    let cfg = ctx.cfg;
    let scales = ctx.step_scales();
    let mut g = Gradients::zeros_like(params);
    let (mut current, mut min_rate) = ctx.value_and_gradient(params, &mut g);
    if !current.is_finite() {
        return Err(Error::Diverged { epoch: 0 });
    }
    let mut trace = vec![current];

    for epoch in 1..=cfg.max_epochs {
        for u in 0..params.theta.rows() {
            let step = cfg.learning_rate / scales.per_user[u].max(1.0);
            for (v, gv) in params.theta.row_mut(u).iter_mut().zip(g.theta.row(u)) {
                *v -= step * gv;
            }
        }
        for i in 0..params.beta.rows() {
            let step = cfg.learning_rate / scales.per_item[i].max(1.0);
            for (v, gv) in params.beta.row_mut(i).iter_mut().zip(g.beta.row(i)) {
                *v -= step * gv;
            }
        }
        if cfg.correction == Correction::Deconfounded {
            for (u, (v, gv)) in params.gamma.iter_mut().zip(&g.gamma).enumerate() {
                *v -= cfg.learning_rate / scales.gamma[u].max(1.0) * gv;
            }
            if cfg.fit_intercept {
                params.intercept -= cfg.learning_rate / scales.intercept.max(1.0) * g.intercept;
            }
        }

        let (next, rate) = ctx.value_and_gradient(params, &mut g);
        if !next.is_finite() {
            return Err(Error::Diverged { epoch });
        }
        if let Some(r) = rate {
            min_rate = Some(min_rate.map_or(r, |m: f64| m.min(r)));
        }
        trace.push(next);
        let rel = (current - next).abs() / current.abs().max(1e-12);
        current = next;
        if rel < cfg.tol {
            break;
        }
    }
    Ok((trace, min_rate))
}

/// Predicted potential rating under exposure for a training-time pair:
/// the variant mean at `a = 1` plus, when deconfounded, the correction
/// `gamma_u * a_hat_ui + beta_0`. Under the softplus count link the
/// modeled mean is the softplus of that sum; otherwise the raw affine
/// value is returned (no clamping — metrics see the model as it is).
pub fn predict_existing(
    model: &OutcomeModel,
    sub: Option<&SubstituteConfounder>,
    u: usize,
    i: usize,
) -> Result<f64> {
    if u >= model.n_users() {
        return Err(Error::IndexOutOfRange {
            what: "user",
            index: u,
            bound: model.n_users(),
        });
    }
    if i >= model.n_items() {
        return Err(Error::IndexOutOfRange {
            what: "item",
            index: i,
            bound: model.n_items(),
        });
    }
    let adjust = if model.cfg.correction == Correction::Deconfounded {
        let sub = sub.ok_or_else(|| {
            Error::invalid("deconfounded predictions require the substitute confounder")
        })?;
        model.gamma[u] * sub.value(u, i) + model.intercept
    } else {
        0.0
    };
    let eta = dot(model.theta.row(u), model.beta.row(i)) + adjust;
    Ok(apply_prediction_link(&model.cfg, eta))
}

fn apply_prediction_link(cfg: &OutcomeConfig, eta: f64) -> f64 {
    match (cfg.variant, cfg.poisson_link) {
        (Variant::Poisson, PoissonLink::Softplus) => {
            if eta > 30.0 {
                eta
            } else {
                eta.exp().ln_1p()
            }
        }
        _ => eta,
    }
}

/// Predictions for a user unseen at training time.
///
/// Under the deconfounded correction the user's exposure factors come
/// from the exposure-model fold-in, so `pf` is required; the other
/// corrections never touch the substitute and accept `None`. The outcome
/// factors `theta` and `gamma` are then fit by MAP on the user's ratings
/// with the item factors and intercept frozen. Under the IPW correction
/// the refit falls back to the uncorrected observed-only objective, since
/// per-entry propensities do not exist for a new user. With no ratings at
/// all, the factors stay at their prior mode (zero), every prediction
/// equals the intercept, and the result is flagged.
pub fn predict_new_user(
    model: &OutcomeModel,
    pf: Option<&PFPosterior>,
    req: &PredictionRequest,
    cfg: &OutcomeConfig,
) -> Result<NewUserPrediction> {
    cfg.validate()?;
    let data = match &req.user {
        RequestUser::New(data) => data,
        RequestUser::Existing(_) => {
            return Err(Error::invalid(
                "predict_new_user expects a new-user request; use predict_existing",
            ))
        }
    };
    let n_items = model.n_items();
    if let Some(pf) = pf {
        if pf.n_items() != n_items {
            return Err(Error::invalid(format!(
                "exposure posterior covers {} items but the outcome model has {n_items}",
                pf.n_items()
            )));
        }
    }
    if cfg.variant != model.cfg.variant || cfg.correction != model.cfg.correction {
        return Err(Error::InvalidConfig(
            "prediction config must keep the model's variant and correction".into(),
        ));
    }
    if cfg.k != model.cfg.k {
        return Err(Error::InvalidConfig(
            "prediction config must keep the model's latent dimension".into(),
        ));
    }
    for &(i, _) in data.exposures.iter().chain(&data.ratings) {
        if i as usize >= n_items {
            return Err(Error::IndexOutOfRange {
                what: "item",
                index: i as usize,
                bound: n_items,
            });
        }
    }
    for &i in &req.items {
        if i as usize >= n_items {
            return Err(Error::IndexOutOfRange {
                what: "item",
                index: i as usize,
                bound: n_items,
            });
        }
    }

    let deconf = model.cfg.correction == Correction::Deconfounded;
    // Exposure-side fold-in, then the new user's substitute row; only the
    // deconfounded correction consumes it.
    let user_sub = if deconf {
        let pf = pf.ok_or_else(|| {
            Error::invalid("deconfounded new-user prediction needs the exposure posterior")
        })?;
        let folded = fold_in_user(pf, &data.exposures, &pf.cfg)?;
        let item_means = Matrix::from_fn(pf.n_items(), pf.k(), |r, c| {
            pf.item_shape.get(r, c) / pf.item_rate.get(r, c)
        });
        Some(SubstituteConfounder {
            user_means: Matrix::from_vec(1, pf.k(), folded.mean.clone()),
            item_means,
        })
    } else {
        None
    };
    let (theta, gamma, prior_fallback) = if data.ratings.is_empty() {
        log::warn!("new user supplied no ratings; predicting from the prior mode");
        (vec![0.0; model.cfg.k], 0.0, true)
    } else {
        let triplets: Vec<(u32, u32, f64)> =
            data.ratings.iter().map(|&(i, v)| (0, i, v)).collect();
        let row = SparseInteractions::from_triplets(1, n_items, triplets)?;
        let mut user_cfg = cfg.clone();
        if user_cfg.correction == Correction::Ipw {
            user_cfg.correction = Correction::None;
        }
        let ctx = ObjectiveContext {
            train: &row,
            sub: user_sub.as_ref(),
            ipw_weights: None,
            cfg: &user_cfg,
        };
        let mut params = init_params(&row, &user_cfg, ctx.included_pairs());
        params.beta = model.beta.clone();
        params.intercept = model.intercept;
        minimize_single_user(&ctx, &mut params)?;
        (params.theta.row(0).to_vec(), params.gamma[0], false)
    };

    let values = req
        .items
        .iter()
        .map(|&i| {
            let adjust = match &user_sub {
                Some(sub) => gamma * sub.value(0, i as usize) + model.intercept,
                None => 0.0,
            };
            let eta = dot(&theta, model.beta.row(i as usize)) + adjust;
            apply_prediction_link(&model.cfg, eta)
        })
        .collect();
    Ok(NewUserPrediction {
        values,
        prior_fallback,
        theta,
        gamma,
    })
}

/// The single-user refit: identical descent, but only the user's factor
/// row and gamma move; item factors and the intercept stay frozen.
fn minimize_single_user(ctx: &ObjectiveContext, params: &mut Params) -> Result<()> {
    let cfg = ctx.cfg;
    let scales = ctx.step_scales();
    let mut g = Gradients::zeros_like(params);
    let (mut current, _) = ctx.value_and_gradient(params, &mut g);
    if !current.is_finite() {
        return Err(Error::Diverged { epoch: 0 });
    }
    for epoch in 1..=cfg.max_epochs {
        let step = cfg.learning_rate / scales.per_user[0].max(1.0);
        for (v, gv) in params.theta.row_mut(0).iter_mut().zip(g.theta.row(0)) {
            *v -= step * gv;
        }
        if cfg.correction == Correction::Deconfounded {
            params.gamma[0] -= cfg.learning_rate / scales.gamma[0].max(1.0) * g.gamma[0];
        }
        let (next, _) = ctx.value_and_gradient(params, &mut g);
        if !next.is_finite() {
            return Err(Error::Diverged { epoch });
        }
        let rel = (current - next).abs() / current.abs().max(1e-12);
        current = next;
        if rel < cfg.tol {
            break;
        }
    }
    Ok(())
}

/// Orders candidate items by descending prediction, ties broken by
/// ascending item index, so the result is a deterministic function of the
/// prediction set alone.
pub fn rank_items<F: FnMut(u32) -> f64>(candidates: &[u32], mut predict: F) -> Vec<u32> {
    let mut scored: Vec<(u32, f64, ())> =
        candidates.iter().map(|&i| (i, predict(i), ())).collect();
    crate::metrics::sort_into_ranking_order(&mut scored);
    scored.into_iter().map(|(i, _, ())| i).collect()
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

/// Writes a fitted model as a text table: a `#`-prefixed config header,
/// then `theta u k v`, `beta i k v`, `gamma u v`, and `intercept v` rows.
/// Floats use 17 significant digits, so a read-back is lossless.
pub fn write_outcome_model(model: &OutcomeModel, path: impl AsRef<std::path::Path>) -> Result<()> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let cfg = &model.cfg;
    let mut out = String::new();
    out.push_str("# outcome-model v1\n");
    out.push_str(&format!("# variant {}\n", cfg.variant));
    out.push_str(&format!("# correction {}\n", cfg.correction));
    out.push_str(&format!("# k {}\n", cfg.k));
    out.push_str(&format!(
        "# priors {:.16e} {:.16e} {:.16e}\n",
        cfg.prior_std_theta_beta, cfg.prior_std_gamma, cfg.prior_std_intercept
    ));
    out.push_str(&format!("# sigma2 {:.16e}\n", cfg.sigma2));
    out.push_str(&format!("# alpha_weight {:.16e}\n", cfg.alpha_weight));
    out.push_str(&format!("# learning_rate {:.16e}\n", cfg.learning_rate));
    out.push_str(&format!("# max_epochs {}\n", cfg.max_epochs));
    out.push_str(&format!("# tol {:.16e}\n", cfg.tol));
    out.push_str(&format!("# seed {}\n", cfg.seed));
    out.push_str(&format!("# fit_intercept {}\n", cfg.fit_intercept));
    out.push_str(&format!("# poisson_link {}\n", cfg.poisson_link));
    out.push_str(&format!("# dims {} {}\n", model.n_users(), model.n_items()));
    let trace: Vec<String> = model
        .objective_trace
        .iter()
        .map(|v| format!("{v:.16e}"))
        .collect();
    out.push_str(&format!("# objective {}\n", trace.join(",")));
    for u in 0..model.n_users() {
        for kk in 0..cfg.k {
            out.push_str(&format!("theta {u} {kk} {:.16e}\n", model.theta.get(u, kk)));
        }
    }
    for i in 0..model.n_items() {
        for kk in 0..cfg.k {
            out.push_str(&format!("beta {i} {kk} {:.16e}\n", model.beta.get(i, kk)));
        }
    }
    for (u, v) in model.gamma.iter().enumerate() {
        out.push_str(&format!("gamma {u} {v:.16e}\n"));
    }
    out.push_str(&format!("intercept {:.16e}\n", model.intercept));
    std::fs::write(path, out).map_err(|e| Error::io(display, e))
}

/// Reads a model written by [`write_outcome_model`].
pub fn read_outcome_model(path: impl AsRef<std::path::Path>) -> Result<OutcomeModel> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(&display, e))?;
    let parse_err = |line: usize, message: String| Error::Parse {
        path: display.clone(),
        line,
        message,
    };

    let mut cfg = OutcomeConfig::default();
    let mut dims: Option<(usize, usize)> = None;
    let mut objective_trace = Vec::new();
    let mut theta: Option<Matrix> = None;
    let mut beta: Option<Matrix> = None;
    let mut gamma: Vec<f64> = Vec::new();
    let mut intercept = 0.0;

    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if let Some(rest) = line.strip_prefix("# ") {
            let tokens: Vec<&str> = rest.split_whitespace().collect();
            let key = tokens.first().copied().unwrap_or("");
            let arg = |n: usize| {
                tokens
                    .get(n + 1)
                    .copied()
                    .ok_or_else(|| parse_err(line_no, format!("{key} header is incomplete")))
            };
            macro_rules! set_parsed {
                ($field:expr, $n:expr) => {
                    $field = arg($n)?.parse().map_err(|_| {
                        parse_err(line_no, format!("bad {key} value {:?}", tokens[$n + 1]))
                    })?
                };
            }
            match key {
                "outcome-model" => {}
                "variant" => cfg.variant = arg(0)?.parse()?,
                "correction" => cfg.correction = arg(0)?.parse()?,
                "poisson_link" => cfg.poisson_link = arg(0)?.parse()?,
                "k" => set_parsed!(cfg.k, 0),
                "sigma2" => set_parsed!(cfg.sigma2, 0),
                "alpha_weight" => set_parsed!(cfg.alpha_weight, 0),
                "learning_rate" => set_parsed!(cfg.learning_rate, 0),
                "max_epochs" => set_parsed!(cfg.max_epochs, 0),
                "tol" => set_parsed!(cfg.tol, 0),
                "seed" => set_parsed!(cfg.seed, 0),
                "fit_intercept" => set_parsed!(cfg.fit_intercept, 0),
                "priors" => {
                    if tokens.len() != 4 {
                        return Err(parse_err(line_no, "expected three prior stds".into()));
                    }
                    set_parsed!(cfg.prior_std_theta_beta, 0);
                    set_parsed!(cfg.prior_std_gamma, 1);
                    set_parsed!(cfg.prior_std_intercept, 2);
                }
                "dims" => {
                    if tokens.len() != 3 {
                        return Err(parse_err(line_no, "bad dims".into()));
                    }
                    let mut parsed = (0usize, 0usize);
                    set_parsed!(parsed.0, 0);
                    set_parsed!(parsed.1, 1);
                    dims = Some(parsed);
                }
                "objective" => {
                    objective_trace = arg(0)?
                        .split(',')
                        .filter(|s| !s.is_empty())
                        .map(|v| {
                            v.parse()
                                .map_err(|_| parse_err(line_no, format!("bad value {v:?}")))
                        })
                        .collect::<Result<Vec<f64>>>()?;
                }
                other => return Err(parse_err(line_no, format!("unknown header key {other:?}"))),
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let (n_users, n_items) =
            dims.ok_or_else(|| parse_err(line_no, "dims header missing before table".into()))?;
        if theta.is_none() {
            theta = Some(Matrix::zeros(n_users, cfg.k));
            beta = Some(Matrix::zeros(n_items, cfg.k));
            gamma = vec![0.0; n_users];
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let bad = |msg: &str| parse_err(line_no, msg.into());
        match fields.as_slice() {
            ["theta", u, kk, v] | ["beta", u, kk, v] => {
                let m = if fields[0] == "theta" {
                    theta.as_mut().expect("allocated above")
                } else {
                    beta.as_mut().expect("allocated above")
                };
                let r: usize = u.parse().map_err(|_| bad("bad row index"))?;
                let c: usize = kk.parse().map_err(|_| bad("bad component"))?;
                if r >= m.rows() || c >= m.cols() {
                    return Err(bad("index outside declared dims"));
                }
                m.set(r, c, v.parse().map_err(|_| bad("bad value"))?);
            }
            ["gamma", u, v] => {
                let r: usize = u.parse().map_err(|_| bad("bad user index"))?;
                if r >= gamma.len() {
                    return Err(bad("gamma index outside declared dims"));
                }
                gamma[r] = v.parse().map_err(|_| bad("bad value"))?;
            }
            ["intercept", v] => intercept = v.parse().map_err(|_| bad("bad value"))?,
            _ => return Err(bad("unrecognized table row")),
        }
    }

    let theta = theta.ok_or_else(|| parse_err(0, "missing parameter table".into()))?;
    let beta = beta.expect("allocated with theta");
    Ok(OutcomeModel {
        cfg,
        theta,
        beta,
        gamma,
        intercept,
        objective_trace,
        min_poisson_rate: None,
    })
}
