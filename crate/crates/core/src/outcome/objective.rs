//! Negative-log-posterior objective and analytic gradients for the
//! outcome models.
//!
//! One engine serves every variant x correction combination. A "term" is
//! one (user, item) pair's likelihood contribution; which pairs enter the
//! objective depends on the combination:
//!
//! * probabilistic, no correction or IPW: exposed pairs only (unexposed
//!   pairs have mean `a * theta.beta = 0` and target 0, so they contribute
//!   nothing);
//! * probabilistic with the confounder correction, and the weighted and
//!   count variants outside IPW: every pair, with unexposed pairs entering
//!   at the observed convention `y = 0`;
//! * IPW: exposed pairs only, each weighted by its inverse propensity.
//!
//! Objectives are reported up to additive constants (Gaussian
//! normalizations, `ln y!`), which affect neither the optimum nor the
//! gradients.

use crate::data::SparseInteractions;
use crate::matrix::{dot, Matrix};
use crate::pf::SubstituteConfounder;

use super::{Correction, OutcomeConfig, PoissonLink, Variant};

/// Rate floor for the count likelihood under the clamp link.
pub(crate) const RATE_FLOOR: f64 = 1e-6;

/// Per-variant mean of the outcome given the linear term and exposure.
#[must_use]
#[inline]
pub fn mean_fn(variant: Variant, lin: f64, a: f64) -> f64 {
    match variant {
        Variant::Probabilistic => a * lin,
        Variant::Weighted | Variant::Poisson => lin,
    }
}

/// Free parameters of an outcome model during optimization.
#[derive(Debug, Clone)]
pub(crate) struct Params {
    pub theta: Matrix,
    pub beta: Matrix,
    /// One coefficient per user; all zeros unless deconfounded.
    pub gamma: Vec<f64>,
    pub intercept: f64,
}

#[derive(Debug, Clone)]
pub(crate) struct Gradients {
    pub theta: Matrix,
    pub beta: Matrix,
    pub gamma: Vec<f64>,
    pub intercept: f64,
}

impl Gradients {
    pub fn zeros_like(p: &Params) -> Self {
        Self {
            theta: Matrix::zeros(p.theta.rows(), p.theta.cols()),
            beta: Matrix::zeros(p.beta.rows(), p.beta.cols()),
            gamma: vec![0.0; p.gamma.len()],
            intercept: 0.0,
        }
    }

    fn clear(&mut self) {
        self.theta.as_mut_slice().fill(0.0);
        self.beta.as_mut_slice().fill(0.0);
        self.gamma.fill(0.0);
        self.intercept = 0.0;
    }
}

/// Per-block curvature proxies used to normalize gradient steps: for each
/// parameter block, the weighted count of likelihood terms touching it
/// plus the prior's exact curvature. A user factor might see 20 terms
/// while the intercept sees every pair and a tight prior contributes
/// `1 / std^2`, so one fixed learning rate cannot serve the raw
/// gradients. The scales depend only on the data, the weights, and the
/// substitute — never on the parameters — so dividing each block's step
/// by its scale is a constant diagonal rescaling that leaves the
/// objective's stationary points untouched.
#[derive(Debug, Clone)]
pub(crate) struct StepScales {
    pub per_user: Vec<f64>,
    pub per_item: Vec<f64>,
    pub gamma: Vec<f64>,
    pub intercept: f64,
}

/// Everything the objective needs besides the parameters.
pub(crate) struct ObjectiveContext<'a> {
    pub train: &'a SparseInteractions,
    pub sub: Option<&'a SubstituteConfounder>,
    /// Inverse-propensity weights `1 / p_ui`, aligned with
    /// `train.entries()`; present iff the correction is IPW.
    pub ipw_weights: Option<Vec<f64>>,
    pub cfg: &'a OutcomeConfig,
}

impl ObjectiveContext<'_> {
    /// Whether unexposed pairs carry likelihood terms.
    pub fn includes_unexposed(&self) -> bool {
        match self.cfg.correction {
            Correction::Ipw => false,
            Correction::Deconfounded => true,
            Correction::None => !matches!(self.cfg.variant, Variant::Probabilistic),
        }
    }

    fn deconfounded(&self) -> bool {
        self.cfg.correction == Correction::Deconfounded
    }

    /// Number of (user, item) pairs carrying likelihood terms.
    pub fn included_pairs(&self) -> usize {
        if self.includes_unexposed() {
            self.train.n_users() * self.train.n_items()
        } else {
            self.train.nnz()
        }
    }

    pub fn step_scales(&self) -> StepScales {
        let cfg = self.cfg;
        let (n_users, n_items) = (self.train.n_users(), self.train.n_items());
        let deconf = self.deconfounded();
        // Per-term curvature in mu is w * c / sigma2 for the Gaussian
        // variants; the count variant's varies with the rate, so its
        // weight stands in as an order-of-magnitude proxy.
        let noise = match cfg.variant {
            Variant::Probabilistic | Variant::Weighted => cfg.sigma2,
            Variant::Poisson => 1.0,
        };

        let sq = |s: f64| 1.0 / (s * s);
        let mut per_user = vec![sq(cfg.prior_std_theta_beta); n_users];
        let mut per_item = vec![sq(cfg.prior_std_theta_beta); n_items];
        let mut gamma = vec![sq(cfg.prior_std_gamma); n_users];
        let mut intercept = sq(cfg.prior_std_intercept);

        for (pos, e) in self.train.entries().iter().enumerate() {
            let (u, i) = (e.user as usize, e.item as usize);
            let w = self.ipw_weights.as_ref().map_or(1.0, |ws| ws[pos]);
            let c = match cfg.variant {
                Variant::Weighted => 1.0 + cfg.alpha_weight * e.value,
                _ => 1.0,
            };
            let q = w * c / noise;
            per_user[u] += q;
            per_item[i] += q;
            if deconf {
                let ahat = self.sub.expect("checked at fit entry").value(u, i);
                gamma[u] += q * ahat * ahat;
                intercept += q;
            }
        }

        if self.includes_unexposed() {
            // Unexposed pairs carry unit weight and confidence. Under the
            // probabilistic variant their mean is `0 * theta.beta`, so
            // they never touch the factors, only gamma and the intercept.
            let base = 1.0 / noise;
            let factors_included = cfg.variant != Variant::Probabilistic;
            let mut col_nnz = vec![0usize; n_items];
            for e in self.train.entries() {
                col_nnz[e.item as usize] += 1;
            }
            for u in 0..n_users {
                let missing = (n_items - self.train.row(u).len()) as f64;
                if factors_included {
                    per_user[u] += missing * base;
                }
                if deconf {
                    intercept += missing * base;
                    let sub = self.sub.expect("checked at fit entry");
                    let mut unexposed_sq: f64 = (0..n_items)
                        .map(|i| {
                            let ahat = sub.value(u, i);
                            ahat * ahat
                        })
                        .sum();
                    for e in self.train.row(u) {
                        let ahat = sub.value(u, e.item as usize);
                        unexposed_sq -= ahat * ahat;
                    }
                    gamma[u] += unexposed_sq.max(0.0) * base;
                }
            }
            if factors_included {
                for (i, &nnz) in col_nnz.iter().enumerate() {
                    per_item[i] += (n_users - nnz) as f64 * base;
                }
            }
        }

        StepScales {
            per_user,
            per_item,
            gamma,
            intercept,
        }
    }

    /// Objective value alone (finite-difference oracle in the tests).
    #[cfg(test)]
    pub fn value(&self, p: &Params) -> f64 {
        self.evaluate::<false>(p, None).0
    }

    /// Objective value, gradients, and (for the count variant) the
    /// smallest rate that entered the likelihood.
    pub fn value_and_gradient(&self, p: &Params, g: &mut Gradients) -> (f64, Option<f64>) {
        g.clear();
        self.evaluate::<true>(p, Some(g))
    }

    fn evaluate<const GRAD: bool>(
        &self,
        p: &Params,
        mut g: Option<&mut Gradients>,
    ) -> (f64, Option<f64>) {
        let cfg = self.cfg;
        let deconf = self.deconfounded();
        let all_pairs = self.includes_unexposed();
        let n_items = self.train.n_items() as u32;
        let mut value = 0.0;
        let mut min_rate: Option<f64> = None;

        let mut visit = |u: usize, i: usize, a: f64, y: f64, w: f64, g: &mut Option<&mut Gradients>| {
            let lin = dot(p.theta.row(u), p.beta.row(i));
            let ahat = if deconf {
                self.sub.expect("checked at fit entry").value(u, i)
            } else {
                0.0
            };
            let adjust = if deconf {
                p.gamma[u] * ahat + p.intercept
            } else {
                0.0
            };

            // d(term)/d(mu or eta); the chain through lin / gamma /
            // intercept is shared across variants.
            let dterm_dpred;
            match cfg.variant {
                Variant::Probabilistic | Variant::Weighted => {
                    let mu = mean_fn(cfg.variant, lin, a) + adjust;
                    let c = match cfg.variant {
                        Variant::Weighted if a > 0.0 => 1.0 + cfg.alpha_weight * y,
                        _ => 1.0,
                    };
                    let resid = y - mu;
                    value += w * c * resid * resid / (2.0 * cfg.sigma2);
                    dterm_dpred = -w * c * resid / cfg.sigma2;
                }
                Variant::Poisson => {
                    let eta = lin + adjust;
                    let (rate, drate) = match cfg.poisson_link {
                        PoissonLink::Clamp => {
                            if eta > RATE_FLOOR {
                                (eta, 1.0)
                            } else {
                                (RATE_FLOOR, 0.0)
                            }
                        }
                        PoissonLink::Softplus => {
                            let sp = softplus(eta).max(1e-12);
                            (sp, sigmoid(eta))
                        }
                    };
                    min_rate = Some(min_rate.map_or(rate, |m: f64| m.min(rate)));
                    value += w * (rate - y * rate.ln());
                    dterm_dpred = w * (1.0 - y / rate) * drate;
                }
            }

            if GRAD {
                let g = g.as_mut().expect("gradient buffer present");
                // For the probabilistic variant the linear term enters as
                // a * lin, so unexposed pairs move theta/beta not at all.
                let dpred_dlin = match cfg.variant {
                    Variant::Probabilistic => a,
                    Variant::Weighted | Variant::Poisson => 1.0,
                };
                if dpred_dlin != 0.0 {
                    let scale = dterm_dpred * dpred_dlin;
                    let (tu, bi) = (p.theta.row(u), p.beta.row(i));
                    let gt = g.theta.row_mut(u);
                    for (gtk, bik) in gt.iter_mut().zip(bi) {
                        *gtk += scale * bik;
                    }
                    let gb = g.beta.row_mut(i);
                    for (gbk, tuk) in gb.iter_mut().zip(tu) {
                        *gbk += scale * tuk;
                    }
                }
                if deconf {
                    g.gamma[u] += dterm_dpred * ahat;
                    if cfg.fit_intercept {
                        g.intercept += dterm_dpred;
                    }
                }
            }
        };

        if all_pairs {
            // Merge-scan each user's sorted entries against the full item
            // range so unexposed pairs are visited exactly once.
            for u in 0..self.train.n_users() {
                let mut row = self.train.row(u).iter().peekable();
                for i in 0..n_items {
                    let (a, y) = match row.peek() {
                        Some(e) if e.item == i => {
                            let y = e.value;
                            row.next();
                            (1.0, y)
                        }
                        _ => (0.0, 0.0),
                    };
                    visit(u, i as usize, a, y, 1.0, &mut g);
                }
            }
        } else {
            for (idx, e) in self.train.entries().iter().enumerate() {
                let w = self.ipw_weights.as_ref().map_or(1.0, |ws| ws[idx]);
                visit(e.user as usize, e.item as usize, 1.0, e.value, w, &mut g);
            }
        }

        // Zero-mean Gaussian priors; gamma and the intercept only exist as
        // parameters under the confounder correction.
        let tb_var = cfg.prior_std_theta_beta * cfg.prior_std_theta_beta;
        for v in p.theta.as_slice().iter().chain(p.beta.as_slice()) {
            value += v * v / (2.0 * tb_var);
        }
        if GRAD {
            let g = g.as_mut().expect("gradient buffer present");
            for (gv, v) in g
                .theta
                .as_mut_slice()
                .iter_mut()
                .zip(p.theta.as_slice())
            {
                *gv += v / tb_var;
            }
            for (gv, v) in g.beta.as_mut_slice().iter_mut().zip(p.beta.as_slice()) {
                *gv += v / tb_var;
            }
        }
        if deconf {
            let g_var = cfg.prior_std_gamma * cfg.prior_std_gamma;
            let i_var = cfg.prior_std_intercept * cfg.prior_std_intercept;
            for &v in &p.gamma {
                value += v * v / (2.0 * g_var);
            }
            if cfg.fit_intercept {
                value += p.intercept * p.intercept / (2.0 * i_var);
            }
            if GRAD {
                let g = g.as_mut().expect("gradient buffer present");
                for (gv, v) in g.gamma.iter_mut().zip(&p.gamma) {
                    *gv += v / g_var;
                }
                if cfg.fit_intercept {
                    g.intercept += p.intercept / i_var;
                }
            }
        }

        (value, min_rate)
    }
}

#[inline]
fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}
