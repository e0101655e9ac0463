//! Acceptance gate: one test per release criterion, each printing a
//! single `criterion N (...): PASS` / `FAIL` line (visible with
//! `--nocapture`) before asserting.
//!
//! Every expected value here is computed by an independent oracle inside
//! this file — samplers, quadrature-checked constants, brute-force metric
//! reimplementations, closed forms — never by the code under test.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};

use deconf::data::SparseInteractions;
use deconf::ipw::{fit_propensity, PropensityConfig};
use deconf::matrix::Matrix;
use deconf::metrics::{
    mae, mse, ndcg, per_item_accuracy, recall_at_k, GainScheme, RankedList,
};
use deconf::outcome::{
    fit_outcome, objective_at, predict_existing, Correction, OutcomeConfig, OutcomeModel,
    Variant,
};
use deconf::pf::{compute_substitute, fit_pf, PFConfig, PFPosterior, SubstituteConfounder};
use deconf::sim::{
    causal_error, draw_item_subsets, generate, randomized_test_error, sweep, CausalLoss,
    ModelSpec, SimConfig, SweepMethod,
};

/// Runs one criterion body, prints its verdict line, and panics on
/// failure so the suite stays an ordinary test target.
fn check(n: u32, name: &str, body: impl FnOnce() -> Result<(), String>) {
    match body() {
        Ok(()) => println!("criterion {n} ({name}): PASS"),
        Err(msg) => {
            println!("criterion {n} ({name}): FAIL — {msg}");
            panic!("criterion {n} ({name}) failed: {msg}");
        }
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

// ---------------------------------------------------------------------
// 1. Exposure-model inference: ELBO monotonicity and agreement with an
//    exact-posterior Gibbs sampler on a tiny instance.
// ---------------------------------------------------------------------

/// Independent oracle: Gibbs sampling of the exact posterior for the 2x2
/// identity exposure matrix at K = 1, prior shape = rate = c. Both
/// conditionals are conjugate Gammas. Returns the long-run factor means
/// and the mean of the product `pi_0 * lambda_0`.
fn gibbs_identity_2x2(c: f64, seed: u64) -> ([f64; 2], f64) {
    let a = [[1.0, 0.0], [0.0, 1.0]];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pi = [1.0f64, 1.0];
    let mut lambda = [1.0f64, 1.0];
    let (sweeps, burn_in) = (100_000, 5_000);
    let mut pi_sum = [0.0f64; 2];
    let mut prod_sum = 0.0f64;
    for t in 0..sweeps {
        for u in 0..2 {
            let shape = c + a[u][0] + a[u][1];
            let rate = c + lambda[0] + lambda[1];
            pi[u] = Gamma::new(shape, 1.0 / rate).unwrap().sample(&mut rng);
        }
        for i in 0..2 {
            let shape = c + a[0][i] + a[1][i];
            let rate = c + pi[0] + pi[1];
            lambda[i] = Gamma::new(shape, 1.0 / rate).unwrap().sample(&mut rng);
        }
        if t >= burn_in {
            pi_sum[0] += pi[0];
            pi_sum[1] += pi[1];
            prod_sum += pi[0] * lambda[0];
        }
    }
    let n = f64::from(sweeps - burn_in);
    ([pi_sum[0] / n, pi_sum[1] / n], prod_sum / n)
}

#[test]
fn criterion_01_exposure_model_inference() {
    check(1, "exposure model inference", || {
        // ELBO never decreases across coordinate-ascent sweeps, on 20
        // randomly shaped seeded instances.
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let n_users = rng.gen_range(6..25);
            let n_items = rng.gen_range(6..25);
            let density = rng.gen_range(0.2..0.5);
            let mut triplets = Vec::new();
            for u in 0..n_users as u32 {
                for i in 0..n_items as u32 {
                    if rng.gen::<f64>() < density {
                        triplets.push((u, i, 1.0));
                    }
                }
            }
            if triplets.is_empty() {
                triplets.push((0, 0, 1.0));
            }
            let data = SparseInteractions::from_triplets(n_users, n_items, triplets)
                .map_err(|e| e.to_string())?;
            let cfg = PFConfig {
                k: rng.gen_range(1..5),
                max_iters: 60,
                tol: 1e-12,
                seed,
                ..PFConfig::default()
            };
            let post = fit_pf(&data, &cfg).map_err(|e| e.to_string())?;
            ensure(post.elbo_trace.len() >= 2, || {
                format!("seed {seed}: trace has {} points", post.elbo_trace.len())
            })?;
            for w in post.elbo_trace.windows(2) {
                ensure(w[1] >= w[0] - 1e-8 * w[0].abs(), || {
                    format!("seed {seed}: ELBO fell from {} to {}", w[0], w[1])
                })?;
            }
        }

        // Variational means track the exact posterior on the 2x2 identity
        // instance at an informative prior, where the mean-field family
        // can represent the posterior to within a couple of percent.
        let c = 3.0;
        let (gibbs_means, gibbs_prod) = gibbs_identity_2x2(c, 99);
        let data = SparseInteractions::from_triplets(2, 2, [(0, 0, 1.0), (1, 1, 1.0)])
            .map_err(|e| e.to_string())?;
        let cfg = PFConfig {
            k: 1,
            c1: c,
            c2: c,
            c3: c,
            c4: c,
            max_iters: 500,
            tol: 1e-12,
            seed: 0,
        };
        let post = fit_pf(&data, &cfg).map_err(|e| e.to_string())?;
        let sub = compute_substitute(&post);
        for u in 0..2 {
            let fitted = post.user_shape.get(u, 0) / post.user_rate.get(u, 0);
            ensure(close(fitted, gibbs_means[u], 0.05), || {
                format!(
                    "user {u}: variational mean {fitted} vs Gibbs {}",
                    gibbs_means[u]
                )
            })?;
        }
        ensure(close(sub.value(0, 0), gibbs_prod, 0.05), || {
            format!(
                "substitute {} vs Gibbs product mean {gibbs_prod}",
                sub.value(0, 0)
            )
        })?;
        Ok(())
    });
}

// ---------------------------------------------------------------------
// 2. The substitute confounder equals the Monte-Carlo mean of the factor
//    dot product under the variational distribution.
// ---------------------------------------------------------------------

#[test]
fn criterion_02_substitute_matches_monte_carlo() {
    check(2, "substitute confounder vs Monte Carlo", || {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (n_users, n_items, k) = (4usize, 4usize, 3usize);
        let draw = |rng: &mut ChaCha8Rng| rng.gen_range(0.5..4.0);
        let post = PFPosterior {
            cfg: PFConfig {
                k,
                ..PFConfig::default()
            },
            user_shape: Matrix::from_fn(n_users, k, |_, _| draw(&mut rng)),
            user_rate: Matrix::from_fn(n_users, k, |_, _| draw(&mut rng)),
            item_shape: Matrix::from_fn(n_items, k, |_, _| draw(&mut rng)),
            item_rate: Matrix::from_fn(n_items, k, |_, _| draw(&mut rng)),
            elbo_trace: Vec::new(),
        };
        let sub = compute_substitute(&post);

        let samples = 1_000_000usize;
        for (u, i) in [(0usize, 0usize), (1, 2), (3, 1)] {
            let user_dists: Vec<Gamma<f64>> = (0..k)
                .map(|kk| {
                    Gamma::new(post.user_shape.get(u, kk), 1.0 / post.user_rate.get(u, kk))
                        .unwrap()
                })
                .collect();
            let item_dists: Vec<Gamma<f64>> = (0..k)
                .map(|kk| {
                    Gamma::new(post.item_shape.get(i, kk), 1.0 / post.item_rate.get(i, kk))
                        .unwrap()
                })
                .collect();
            let mut total = 0.0;
            for _ in 0..samples {
                let mut dot = 0.0;
                for kk in 0..k {
                    dot += user_dists[kk].sample(&mut rng) * item_dists[kk].sample(&mut rng);
                }
                total += dot;
            }
            let mc = total / samples as f64;
            ensure(close(sub.value(u, i), mc, 0.01), || {
                format!(
                    "pair ({u}, {i}): substitute {} vs Monte-Carlo mean {mc}",
                    sub.value(u, i)
                )
            })?;
        }
        Ok(())
    });
}

// ---------------------------------------------------------------------
// 3. Analytic objective gradients match central finite differences for
//    every variant x correction combination.
// ---------------------------------------------------------------------

/// A random small training instance plus a random parameter point.
/// Parameters are kept positive so count-model rates stay away from the
/// clamp kink, where finite differences are meaningless.
fn gradient_fixture(
    seed: u64,
    variant: Variant,
    correction: Correction,
) -> (SparseInteractions, SubstituteConfounder, Vec<f64>, OutcomeModel) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n_users, n_items, k) = (5usize, 4usize, 2usize);
    let mut triplets = Vec::new();
    for u in 0..n_users as u32 {
        for i in 0..n_items as u32 {
            if rng.gen::<f64>() < 0.6 {
                triplets.push((u, i, f64::from(rng.gen_range(1..=5))));
            }
        }
    }
    if triplets.is_empty() {
        triplets.push((0, 0, 3.0));
    }
    let train = SparseInteractions::from_triplets(n_users, n_items, triplets).unwrap();
    let sub = SubstituteConfounder {
        user_means: Matrix::from_fn(n_users, 3, |_, _| rng.gen_range(0.1..1.0)),
        item_means: Matrix::from_fn(n_items, 3, |_, _| rng.gen_range(0.1..1.0)),
    };
    let props: Vec<f64> = (0..train.nnz()).map(|_| rng.gen_range(0.05..1.0)).collect();
    let deconf = correction == Correction::Deconfounded;
    let model = OutcomeModel {
        cfg: OutcomeConfig {
            variant,
            correction,
            k,
            ..OutcomeConfig::default()
        },
        theta: Matrix::from_fn(n_users, k, |_, _| rng.gen_range(0.4..1.2)),
        beta: Matrix::from_fn(n_items, k, |_, _| rng.gen_range(0.4..1.2)),
        gamma: (0..n_users)
            .map(|_| if deconf { rng.gen_range(0.05..0.3) } else { 0.0 })
            .collect(),
        intercept: if deconf { 0.2 } else { 0.0 },
        objective_trace: Vec::new(),
        min_poisson_rate: None,
    };
    (train, sub, props, model)
}

#[test]
fn criterion_03_gradients_match_finite_differences() {
    check(3, "outcome gradients vs finite differences", || {
        let eps = 1e-5;
        for seed in 0..10u64 {
            for variant in [Variant::Probabilistic, Variant::Weighted, Variant::Poisson] {
                for correction in [Correction::None, Correction::Deconfounded, Correction::Ipw] {
                    let (train, sub, props, model) =
                        gradient_fixture(300 + seed, variant, correction);
                    let sub_arg = (correction == Correction::Deconfounded).then_some(&sub);
                    let props_arg =
                        (correction == Correction::Ipw).then_some(props.as_slice());
                    let report = objective_at(&train, sub_arg, props_arg, &model)
                        .map_err(|e| e.to_string())?;
                    let value = |m: &OutcomeModel| -> Result<f64, String> {
                        Ok(objective_at(&train, sub_arg, props_arg, m)
                            .map_err(|e| e.to_string())?
                            .value)
                    };
                    let fd_check = |analytic: f64,
                                        perturb: &dyn Fn(&mut OutcomeModel, f64)|
                     -> Result<(), String> {
                        let mut plus = model.clone();
                        perturb(&mut plus, eps);
                        let mut minus = model.clone();
                        perturb(&mut minus, -eps);
                        let fd = (value(&plus)? - value(&minus)?) / (2.0 * eps);
                        let denom = analytic.abs().max(fd.abs()).max(1e-3);
                        ensure((analytic - fd).abs() / denom < 1e-4, || {
                            format!(
                                "seed {seed} {variant:?}/{correction:?}: \
                                 analytic {analytic} vs finite difference {fd}"
                            )
                        })
                    };
                    for u in 0..model.theta.rows() {
                        for kk in 0..model.theta.cols() {
                            fd_check(report.grad_theta.get(u, kk), &move |m, e| {
                                m.theta.set(u, kk, m.theta.get(u, kk) + e);
                            })?;
                        }
                    }
                    for i in 0..model.beta.rows() {
                        for kk in 0..model.beta.cols() {
                            fd_check(report.grad_beta.get(i, kk), &move |m, e| {
                                m.beta.set(i, kk, m.beta.get(i, kk) + e);
                            })?;
                        }
                    }
                    if correction == Correction::Deconfounded {
                        for u in 0..model.gamma.len() {
                            fd_check(report.grad_gamma[u], &move |m, e| m.gamma[u] += e)?;
                        }
                        fd_check(report.grad_intercept, &|m, e| m.intercept += e)?;
                    }
                }
            }
        }
        Ok(())
    });
}

// ---------------------------------------------------------------------
// 4. Reduction identities: with the extra machinery neutralized, the
//    corrected fits collapse onto the plain ones.
// ---------------------------------------------------------------------

#[test]
fn criterion_04_reduction_identities() {
    check(4, "reduction identities", || {
        let world = generate(&SimConfig {
            n_users: 80,
            n_items: 50,
            k: 3,
            seed: 11,
            ..SimConfig::default()
        })
        .map_err(|e| e.to_string())?;
        let train = &world.observed;

        // (a) A deconfounded fit whose substitute is identically zero and
        // whose confounder-coefficient and intercept priors are pinned at
        // zero predicts like the plain fit, for every variant.
        let zero_sub = SubstituteConfounder {
            user_means: Matrix::zeros(train.n_users(), 2),
            item_means: Matrix::zeros(train.n_items(), 2),
        };
        for variant in [Variant::Probabilistic, Variant::Weighted, Variant::Poisson] {
            let base = OutcomeConfig {
                variant,
                k: 4,
                max_epochs: 150,
                seed: 5,
                ..OutcomeConfig::default()
            };
            let plain = fit_outcome(train, None, None, &base).map_err(|e| e.to_string())?;
            let pinned = OutcomeConfig {
                correction: Correction::Deconfounded,
                prior_std_gamma: 1e-7,
                prior_std_intercept: 1e-7,
                ..base
            };
            let reduced = fit_outcome(train, Some(&zero_sub), None, &pinned)
                .map_err(|e| e.to_string())?;
            let mut worst = 0.0f64;
            for u in 0..train.n_users() {
                for i in 0..train.n_items() {
                    let a = predict_existing(&plain, None, u, i).map_err(|e| e.to_string())?;
                    let b = predict_existing(&reduced, Some(&zero_sub), u, i)
                        .map_err(|e| e.to_string())?;
                    worst = worst.max((a - b).abs());
                }
            }
            ensure(worst < 1e-6, || {
                format!("{variant:?}: zero-substitute fit drifts {worst} from the plain fit")
            })?;
        }

        // (b) Inverse-propensity weighting with every propensity equal to
        // one reweights nothing, so the fit matches the uncorrected one.
        let base = OutcomeConfig {
            k: 4,
            max_epochs: 150,
            seed: 5,
            ..OutcomeConfig::default()
        };
        let plain = fit_outcome(train, None, None, &base).map_err(|e| e.to_string())?;
        let uniform = vec![1.0; train.nnz()];
        let ipw_cfg = OutcomeConfig {
            correction: Correction::Ipw,
            ..base
        };
        let ipw = fit_outcome(train, None, Some(&uniform), &ipw_cfg)
            .map_err(|e| e.to_string())?;
        let worst = plain
            .theta
            .as_slice()
            .iter()
            .zip(ipw.theta.as_slice())
            .chain(plain.beta.as_slice().iter().zip(ipw.beta.as_slice()))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        ensure(worst < 1e-3, || {
            format!("uniform-propensity fit drifts {worst} from the plain fit")
        })?;
        Ok(())
    });
}

// ---------------------------------------------------------------------
// 5. Ranking and accuracy metrics match brute-force reimplementations.
// ---------------------------------------------------------------------

fn brute_dcg(ranked_gains: &[f64]) -> f64 {
    ranked_gains
        .iter()
        .enumerate()
        .map(|(pos, g)| g / ((pos + 2) as f64).log2())
        .sum()
}

/// Brute-force mean NDCG: sort by score descending, discount by position,
/// normalize by the gain-sorted ideal; all-zero-gain users score 1.
fn brute_ndcg(lists: &[(u32, Vec<(u32, f64, f64)>)], gain: impl Fn(f64) -> f64) -> f64 {
    let mut total = 0.0;
    let mut users = 0usize;
    for (_, items) in lists {
        if items.is_empty() {
            continue;
        }
        let mut by_score = items.clone();
        by_score.sort_by(|a, b| b.1.total_cmp(&a.1));
        let gains: Vec<f64> = by_score.iter().map(|&(_, _, r)| gain(r)).collect();
        let mut ideal = gains.clone();
        ideal.sort_by(|a, b| b.total_cmp(a));
        let (dcg, idcg) = (brute_dcg(&gains), brute_dcg(&ideal));
        total += if idcg > 0.0 { dcg / idcg } else { 1.0 };
        users += 1;
    }
    total / users as f64
}

fn brute_recall(lists: &[(u32, Vec<(u32, f64, f64)>)], k: usize, threshold: f64) -> f64 {
    let mut total = 0.0;
    let mut users = 0usize;
    for (_, items) in lists {
        let relevant = items.iter().filter(|&&(_, _, r)| r >= threshold).count();
        if relevant == 0 {
            continue;
        }
        let mut by_score = items.clone();
        by_score.sort_by(|a, b| b.1.total_cmp(&a.1));
        let hits = by_score
            .iter()
            .take(k)
            .filter(|&&(_, _, r)| r >= threshold)
            .count();
        total += hits as f64 / k.min(relevant) as f64;
        users += 1;
    }
    if users == 0 {
        f64::NAN
    } else {
        total / users as f64
    }
}

#[test]
fn criterion_05_metrics_match_brute_force() {
    check(5, "metric oracles", || {
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
            let mut lists = Vec::new();
            let mut triplets = Vec::new();
            let mut predicted = Vec::new();
            let mut actual = Vec::new();
            let mut lookup = std::collections::HashMap::new();
            for user in 0..10u32 {
                let n = rng.gen_range(3..=8);
                // One user in ten rates everything zero, exercising the
                // all-zero-gain convention.
                let all_zero = rng.gen::<f64>() < 0.1;
                let mut items = Vec::new();
                for item in 0..n {
                    let rating = if all_zero {
                        0.0
                    } else {
                        f64::from(rng.gen_range(0..=5))
                    };
                    let score = rng.gen::<f64>();
                    items.push((item, score, rating));
                    triplets.push((user, item, rating));
                    predicted.push(score);
                    actual.push(rating);
                    lookup.insert((user, item), score);
                }
                lists.push((user, items));
            }
            let ranked: Vec<RankedList> = lists
                .iter()
                .map(|(u, items)| RankedList::from_scored(*u, items.clone()))
                .collect();

            for (scheme, gain) in [
                (GainScheme::ExpMinusOne, (|r: f64| r.exp2() - 1.0) as fn(f64) -> f64),
                (GainScheme::LiteralPaper, |r: f64| (r - 1.0).exp2()),
            ] {
                let got = ndcg(&ranked, scheme);
                let want = brute_ndcg(&lists, gain);
                ensure(close(got, want, 1e-12), || {
                    format!("seed {seed} {scheme:?}: ndcg {got} vs brute force {want}")
                })?;
            }
            let got = recall_at_k(&ranked, 5, 3.0);
            let want = brute_recall(&lists, 5, 3.0);
            ensure(
                close(got, want, 1e-12) || (got.is_nan() && want.is_nan()),
                || format!("seed {seed}: recall {got} vs brute force {want}"),
            )?;

            let got = mse(&predicted, &actual);
            let want = predicted
                .iter()
                .zip(&actual)
                .map(|(p, a)| (p - a) * (p - a))
                .sum::<f64>()
                / predicted.len() as f64;
            ensure(close(got, want, 1e-12), || {
                format!("seed {seed}: mse {got} vs brute force {want}")
            })?;
            let got = mae(&predicted, &actual);
            let want = predicted
                .iter()
                .zip(&actual)
                .map(|(p, a)| (p - a).abs())
                .sum::<f64>()
                / predicted.len() as f64;
            ensure(close(got, want, 1e-12), || {
                format!("seed {seed}: mae {got} vs brute force {want}")
            })?;

            let test =
                SparseInteractions::from_triplets(10, 8, triplets).map_err(|e| e.to_string())?;
            let got = per_item_accuracy(&test, |u, i| lookup[&(u, i)]);
            let mut by_item: std::collections::BTreeMap<u32, (f64, f64, usize)> =
                std::collections::BTreeMap::new();
            for (_, items) in &lists {
                for &(item, score, rating) in items {
                    let err = score - rating;
                    let slot = by_item.entry(item).or_insert((0.0, 0.0, 0));
                    slot.0 += err * err;
                    slot.1 += err.abs();
                    slot.2 += 1;
                }
            }
            let n_items = by_item.len() as f64;
            let want_mse =
                by_item.values().map(|&(sq, _, n)| sq / n as f64).sum::<f64>() / n_items;
            let want_mae =
                by_item.values().map(|&(_, ab, n)| ab / n as f64).sum::<f64>() / n_items;
            ensure(close(got.mse, want_mse, 1e-12), || {
                format!("seed {seed}: per-item mse {} vs brute force {want_mse}", got.mse)
            })?;
            ensure(close(got.mae, want_mae, 1e-12), || {
                format!("seed {seed}: per-item mae {} vs brute force {want_mae}", got.mae)
            })?;
        }

        // Hand-derived two-item case: true ratings 5 and 3 ranked
        // worst-first. Gains 2^r - 1 are 31 and 7, so the score is
        // (7 + 31/log2 3) / (31 + 7/log2 3) ~= 0.7499.
        let lists = vec![RankedList::from_scored(
            0,
            vec![(0, 1.0, 5.0), (1, 2.0, 3.0)],
        )];
        let got = ndcg(&lists, GainScheme::ExpMinusOne);
        let log2_3 = 3.0f64.log2();
        let want = (7.0 + 31.0 / log2_3) / (31.0 + 7.0 / log2_3);
        ensure(close(got, want, 1e-12), || {
            format!("two-item case: {got} vs closed form {want}")
        })?;
        ensure((got - 0.7499).abs() < 1e-4, || {
            format!("two-item case: {got} vs hand-derived 0.7499")
        })?;
        Ok(())
    });
}

// ---------------------------------------------------------------------
// 6. The randomized-subset error estimate is unbiased for the exact
//    all-items causal error.
// ---------------------------------------------------------------------

#[test]
fn criterion_06_randomized_subset_estimate_is_unbiased() {
    check(6, "randomized-subset unbiasedness", || {
        let world = generate(&SimConfig {
            n_users: 200,
            n_items: 200,
            k: 3,
            seed: 31,
            ..SimConfig::default()
        })
        .map_err(|e| e.to_string())?;
        let cfg = OutcomeConfig {
            k: 5,
            max_epochs: 150,
            seed: 3,
            ..OutcomeConfig::default()
        };
        let model = fit_outcome(&world.observed, None, None, &cfg).map_err(|e| e.to_string())?;
        let predict =
            |u: usize, i: usize| predict_existing(&model, None, u, i).expect("in range");

        let exact = causal_error(&world, predict, CausalLoss::Mse);
        let redraws = 100usize;
        let estimates: Vec<f64> = (0..redraws)
            .map(|r| {
                let subsets = draw_item_subsets(200, 200, 20, 9000 + r as u64);
                randomized_test_error(&world, &subsets, predict, CausalLoss::Mse)
                    .map_err(|e| e.to_string())
            })
            .collect::<Result<_, _>>()?;
        let mean = estimates.iter().sum::<f64>() / redraws as f64;
        let var = estimates.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>()
            / (redraws - 1) as f64;
        let stderr = (var / redraws as f64).sqrt();
        ensure(stderr > 0.0, || "estimates are degenerate".into())?;
        ensure((mean - exact).abs() <= 2.0 * stderr, || {
            format!(
                "subset-estimate mean {mean} is {:.2} standard errors from the exact error \
                 {exact} (stderr {stderr})",
                (mean - exact).abs() / stderr
            )
        })?;
        Ok(())
    });
}

// ---------------------------------------------------------------------
// 7. Generator invariants hold on every seeded world.
// ---------------------------------------------------------------------

#[test]
fn criterion_07_generator_invariants() {
    check(7, "simulation fidelity", || {
        // Masking identity and truncation bounds across seeds.
        for seed in 0..5u64 {
            let world = generate(&SimConfig {
                n_users: 60,
                n_items: 40,
                k: 3,
                seed,
                ..SimConfig::default()
            })
            .map_err(|e| e.to_string())?;
            let mut exposed = 0usize;
            for u in 0..60 {
                for i in 0..40 {
                    let a = world.exposures.get(u, i);
                    ensure(a == 0.0 || a == 1.0, || {
                        format!("seed {seed}: exposure {a} at ({u}, {i}) is not binary")
                    })?;
                    let y = world.potential.get(u, i);
                    ensure((1.0..=5.0).contains(&y) && y.fract() == 0.0, || {
                        format!("seed {seed}: potential {y} at ({u}, {i}) outside 1..=5")
                    })?;
                    if a == 1.0 {
                        exposed += 1;
                    }
                }
            }
            ensure(world.observed.nnz() == exposed, || {
                format!(
                    "seed {seed}: {} observed entries but {exposed} exposures",
                    world.observed.nnz()
                )
            })?;
            for e in world.observed.entries() {
                let (u, i) = (e.user as usize, e.item as usize);
                ensure(world.exposures.get(u, i) == 1.0, || {
                    format!("seed {seed}: observed entry at unexposed ({u}, {i})")
                })?;
                ensure(e.value == world.potential.get(u, i), || {
                    format!(
                        "seed {seed}: observed {} differs from potential {} at ({u}, {i})",
                        e.value,
                        world.potential.get(u, i)
                    )
                })?;
            }
        }

        // Full confounding makes preferences equal the confounder.
        for seed in 0..5u64 {
            let world = generate(&SimConfig {
                n_users: 50,
                n_items: 30,
                k: 3,
                gamma_theta: 1.0,
                seed,
                ..SimConfig::default()
            })
            .map_err(|e| e.to_string())?;
            ensure(world.theta.as_slice() == world.c.as_slice(), || {
                format!("seed {seed}: preferences differ from the confounder at full mixing")
            })?;
        }

        // No confounding decorrelates them (checked on a large user set).
        for seed in 0..5u64 {
            let world = generate(&SimConfig {
                n_users: 2000,
                n_items: 8,
                k: 3,
                gamma_theta: 0.0,
                seed,
                ..SimConfig::default()
            })
            .map_err(|e| e.to_string())?;
            let (x, y) = (world.theta.as_slice(), world.c.as_slice());
            let n = x.len() as f64;
            let (mx, my) = (
                x.iter().sum::<f64>() / n,
                y.iter().sum::<f64>() / n,
            );
            let cov = x
                .iter()
                .zip(y)
                .map(|(a, b)| (a - mx) * (b - my))
                .sum::<f64>();
            let (vx, vy) = (
                x.iter().map(|a| (a - mx) * (a - mx)).sum::<f64>(),
                y.iter().map(|b| (b - my) * (b - my)).sum::<f64>(),
            );
            let corr = cov / (vx * vy).sqrt();
            ensure(corr.abs() < 0.05, || {
                format!("seed {seed}: preference-confounder correlation {corr} at zero mixing")
            })?;
        }
        Ok(())
    });
}

// ---------------------------------------------------------------------
// 8. Directional study: under confounded exposure the corrected model
//    beats the plain one on causal error, and the margin grows with the
//    confounding strength. The same harness then runs the outcome-shift
//    sweep.
// ---------------------------------------------------------------------

fn study_methods(seed: u64) -> Vec<SweepMethod> {
    let classical = ModelSpec {
        name: "classical".into(),
        pf: PFConfig {
            k: 10,
            seed,
            ..PFConfig::default()
        },
        propensity: PropensityConfig::default(),
        outcome: OutcomeConfig {
            k: 10,
            max_epochs: 400,
            seed,
            ..OutcomeConfig::default()
        },
    };
    let mut deconfounded = classical.clone();
    deconfounded.name = "deconfounded".into();
    deconfounded.outcome.correction = Correction::Deconfounded;
    vec![
        SweepMethod::Model(classical),
        SweepMethod::Model(deconfounded),
    ]
}

#[test]
fn criterion_08_deconfounding_wins_under_confounding() {
    check(8, "directional confounding study", || {
        let methods = study_methods(77);
        let base = SimConfig {
            gamma_y: 3.0,
            seed: 0,
            ..SimConfig::default()
        };
        let grid: Vec<SimConfig> = [0.0, 0.5, 1.0]
            .into_iter()
            .map(|gamma_theta| SimConfig {
                gamma_theta,
                ..base.clone()
            })
            .collect();
        let runs = 10usize;
        let outcome = sweep(&grid, &methods, runs).map_err(|e| e.to_string())?;
        ensure(outcome.failures.is_empty(), || {
            format!("sweep failures: {:?}", outcome.failures)
        })?;

        let cell = |gamma_theta: f64, method: &str, run: usize| -> Result<f64, String> {
            outcome
                .rows
                .iter()
                .find(|r| {
                    r.gamma_theta == gamma_theta
                        && r.method == method
                        && r.run == run
                        && r.metric == "causal_mse"
                })
                .map(|r| r.value)
                .ok_or_else(|| format!("missing row {gamma_theta}/{method}/{run}"))
        };

        // Paired wins at full confounding.
        let mut wins = 0usize;
        for run in 0..runs {
            if cell(1.0, "deconfounded", run)? < cell(1.0, "classical", run)? {
                wins += 1;
            }
        }
        ensure(wins >= 8, || {
            format!("corrected model won only {wins}/{runs} paired runs at full confounding")
        })?;

        // Seed-averaged improvement is non-decreasing in the confounding
        // strength.
        let mut gaps = Vec::new();
        for &gamma_theta in &[0.0, 0.5, 1.0] {
            let mut gap = 0.0;
            for run in 0..runs {
                gap += cell(gamma_theta, "classical", run)?
                    - cell(gamma_theta, "deconfounded", run)?;
            }
            gaps.push(gap / runs as f64);
        }
        ensure(gaps[0] <= gaps[1] && gaps[1] <= gaps[2], || {
            format!("improvement gaps {gaps:?} are not non-decreasing")
        })?;

        // The same harness covers the outcome-shift sweep.
        let shift_grid: Vec<SimConfig> = [0.0, 2.5, 5.0]
            .into_iter()
            .map(|gamma_y| SimConfig {
                gamma_theta: 0.6,
                gamma_y,
                ..base.clone()
            })
            .collect();
        let shift = sweep(&shift_grid, &methods, runs).map_err(|e| e.to_string())?;
        ensure(shift.failures.is_empty(), || {
            format!("outcome-shift sweep failures: {:?}", shift.failures)
        })?;
        let expected_rows = 3 * runs * methods.len() * 2;
        ensure(shift.rows.len() == expected_rows, || {
            format!(
                "outcome-shift sweep produced {} rows, expected {expected_rows}",
                shift.rows.len()
            )
        })?;
        ensure(shift.rows.iter().all(|r| r.value.is_finite()), || {
            "outcome-shift sweep produced non-finite values".into()
        })?;
        Ok(())
    });
}

// ---------------------------------------------------------------------
// 9. Propensity construction: closed-form base rate and exact target
//    grid mean on the half-5s/half-1s instance.
// ---------------------------------------------------------------------

#[test]
fn criterion_09_propensity_closed_form() {
    check(9, "propensity construction", || {
        let mut triplets = Vec::new();
        for i in 0..10u32 {
            triplets.push((0u32, i, 5.0));
            triplets.push((1u32, i, 1.0));
        }
        let ratings =
            SparseInteractions::from_triplets(2, 10, triplets).map_err(|e| e.to_string())?;
        let cfg = PropensityConfig::default();
        let model = fit_propensity(&ratings, &cfg).map_err(|e| e.to_string())?;

        // Ratings of 5 sit above the threshold (attenuation 1); ratings
        // of 1 sit three steps below (attenuation alpha^3), so
        // k = target / ((1 + alpha^3) / 2) with alpha = 1/4:
        // 0.05 / ((1 + 1/64) / 2) = 6.4 / 65.
        let expected_k = 6.4 / 65.0;
        ensure((model.k() - expected_k).abs() < 1e-9, || {
            format!("base propensity {} vs closed form {expected_k}", model.k())
        })?;
        ensure((expected_k - 0.098461).abs() < 1e-6, || {
            "closed form drifted from its hand-computed value".into()
        })?;

        let grid_mean = ratings
            .entries()
            .iter()
            .map(|e| model.propensity(e.value))
            .sum::<f64>()
            / ratings.nnz() as f64;
        ensure((grid_mean - cfg.target_mean).abs() < 1e-6, || {
            format!("grid-mean propensity {grid_mean} vs target {}", cfg.target_mean)
        })?;
        ensure((model.estimated_grid_mean() - cfg.target_mean).abs() < 1e-6, || {
            format!(
                "estimated grid mean {} vs target {}",
                model.estimated_grid_mean(),
                cfg.target_mean
            )
        })?;
        Ok(())
    });
}

// ---------------------------------------------------------------------
// 10. Identical configurations reproduce the results byte for byte.
// ---------------------------------------------------------------------

fn rerun_config() -> deconf::experiment::ExperimentConfig {
    let mut cfg = deconf::experiment::ExperimentConfig::default();
    cfg.sim.n_users = 50;
    cfg.sim.n_items = 35;
    cfg.sim.k = 2;
    cfg.methods = vec![
        deconf::experiment::MethodSpec::Oracle,
        deconf::experiment::MethodSpec::Fit {
            variant: Variant::Probabilistic,
            correction: Correction::None,
        },
        deconf::experiment::MethodSpec::Fit {
            variant: Variant::Probabilistic,
            correction: Correction::Deconfounded,
        },
        deconf::experiment::MethodSpec::Fit {
            variant: Variant::Weighted,
            correction: Correction::Ipw,
        },
    ];
    cfg.grid.outcome_k = vec![2];
    cfg.grid.prior_std = vec![1.0];
    cfg.grid.pf_k = vec![2];
    cfg.outcome.max_epochs = 60;
    cfg.pf.max_iters = 40;
    cfg.eval.relevance_threshold = 2.0;
    cfg.seed = 9;
    cfg
}

#[test]
fn criterion_10_reruns_are_byte_identical() {
    check(10, "end-to-end reproducibility", || {
        let cfg = rerun_config();
        let first = deconf::experiment::run_experiment(&cfg).map_err(|e| e.to_string())?;
        let second = deconf::experiment::run_experiment(&cfg).map_err(|e| e.to_string())?;
        ensure(first.failures.is_empty(), || {
            format!("first run failed: {:?}", first.failures)
        })?;
        let rows = |table: &deconf::experiment::ResultsTable| -> Vec<_> {
            table.results.iter().map(|m| m.row.clone()).collect()
        };
        let (a, b) = (
            deconf::experiment::render_results_csv(&rows(&first)),
            deconf::experiment::render_results_csv(&rows(&second)),
        );
        ensure(a == b, || {
            let mut msg = String::from("results differ between identical runs\n");
            for (la, lb) in a.lines().zip(b.lines()) {
                if la != lb {
                    let _ = writeln!(msg, "  first:  {la}\n  second: {lb}");
                }
            }
            msg
        })?;
        Ok(())
    });
}

// ---------------------------------------------------------------------
// 11. A delimited ratings file the shape of a public 100k-rating dataset
//     drives the full nine-method pipeline to completion.
// ---------------------------------------------------------------------

#[test]
fn criterion_11_file_pipeline_full_method_table() {
    check(11, "file-driven nine-method table", || {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let path = dir.path().join("ratings.tsv");
        let (n_users, n_items, n_ratings) = (943usize, 1682usize, 100_000usize);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut text = String::with_capacity(n_ratings * 12);
        for idx in rand::seq::index::sample(&mut rng, n_users * n_items, n_ratings) {
            let (u, i) = (idx / n_items, idx % n_items);
            let rating = 1 + (u * 7 + i * 13) % 5;
            let _ = writeln!(text, "{}\t{}\t{rating}", u + 1, i + 1);
        }
        std::fs::write(&path, text).map_err(|e| e.to_string())?;

        let mut cfg = deconf::experiment::ExperimentConfig::default();
        cfg.source = deconf::experiment::SourceKind::File;
        cfg.data.path = Some(path);
        cfg.data.index_base = 1;
        cfg.grid.outcome_k = vec![8];
        cfg.grid.prior_std = vec![1.0];
        cfg.grid.pf_k = vec![8];
        cfg.outcome.max_epochs = 120;
        cfg.pf.max_iters = 80;
        cfg.seed = 17;
        let out_dir = dir.path().join("out");
        cfg.output_dir = Some(out_dir.clone());

        let table = deconf::experiment::run_experiment(&cfg).map_err(|e| e.to_string())?;
        ensure(table.failures.is_empty(), || {
            format!("failures: {:?}", table.failures)
        })?;
        ensure(table.results.len() == 9, || {
            format!("expected 9 method rows, got {}", table.results.len())
        })?;
        for m in &table.results {
            let row = &m.row;
            for (name, v) in [
                ("ndcg", row.ndcg),
                ("recall", row.recall),
                ("mse", row.mse),
                ("mae", row.mae),
                ("per-item mse", row.per_item_mse),
                ("per-item mae", row.per_item_mae),
            ] {
                ensure(v.is_finite(), || {
                    format!("{}/{}: {name} is not finite", row.method, row.correction)
                })?;
            }
            ensure(row.selected.is_some(), || {
                format!("{}/{}: no grid point selected", row.method, row.correction)
            })?;
        }

        let files = deconf::experiment::emit_outputs(&table, &out_dir)
            .map_err(|e| e.to_string())?;
        ensure(files.len() == 9 + 3, || {
            format!("expected 12 output files, got {}", files.len())
        })?;
        let results = std::fs::read_to_string(out_dir.join("results.csv"))
            .map_err(|e| e.to_string())?;
        ensure(results.lines().count() == 1 + 9, || {
            format!("results.csv has {} lines", results.lines().count())
        })?;
        Ok(())
    });
}
