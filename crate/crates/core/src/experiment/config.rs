//! Flat key=value experiment configuration.
//!
//! A config file is line-oriented: `key = value` pairs, `#` comments, and
//! blank lines. Every key has a default, so an empty file is a valid
//! config; command-line overrides reuse the same `key=value` syntax via
//! [`apply_override`]. [`canonical_text`] renders every field in a fixed
//! order, which makes configs diffable, round-trippable, and hashable —
//! [`config_hash`] changes exactly when some field changes.

use std::path::PathBuf;

use sha2::{Digest, Sha256};

use crate::data::{LoadOptions, SplitMode};
use crate::error::{Error, Result};
use crate::ipw::PropensityConfig;
use crate::metrics::GainScheme;
use crate::outcome::{Correction, OutcomeConfig, PoissonLink, Variant};
use crate::sim::SimConfig;

/// Where the ratings come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceKind {
    /// Generate a synthetic world; its observed ratings form the dataset.
    Simulate,
    /// Load a delimited rating file from `data_path`.
    File,
}

/// Delimited-file source parameters (used when `source = file`).
#[derive(Debug, Clone, PartialEq)]
pub struct FileSourceSpec {
    pub path: Option<PathBuf>,
    /// Optional separately collected test set with randomized exposure;
    /// attaching one switches the split to train/validation only.
    pub test_path: Option<PathBuf>,
    pub delimiter: char,
    pub user_col: usize,
    pub item_col: usize,
    pub rating_col: usize,
    pub index_base: i64,
    pub header_rows: usize,
    pub rating_min: Option<f64>,
    pub rating_max: Option<f64>,
}

impl Default for FileSourceSpec {
    fn default() -> Self {
        Self {
            path: None,
            test_path: None,
            delimiter: '\t',
            user_col: 0,
            item_col: 1,
            rating_col: 2,
            index_base: 0,
            header_rows: 0,
            rating_min: None,
            rating_max: None,
        }
    }
}

impl FileSourceSpec {
    /// The equivalent loader options.
    #[must_use]
    pub fn load_options(&self) -> LoadOptions {
        LoadOptions {
            delimiter: self.delimiter,
            user_col: self.user_col,
            item_col: self.item_col,
            rating_col: self.rating_col,
            index_base: self.index_base,
            header_rows: self.header_rows,
            rating_scale: match (self.rating_min, self.rating_max) {
                (Some(lo), Some(hi)) => Some((lo, hi)),
                _ => None,
            },
        }
    }
}

/// How the observed data is divided.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitChoice {
    pub mode: SplitMode,
    /// Fraction of users held out entirely from training (> 0 switches the
    /// run to strong generalization).
    pub holdout_fraction: f64,
    /// Per held-out user, the fraction of their entries revealed for
    /// fold-in; the rest are evaluated.
    pub fold_in_fraction: f64,
}

impl Default for SplitChoice {
    fn default() -> Self {
        // Three folds by default so a bare run always has a test fold to
        // report on; 80/20 serves runs that bring their own test set or
        // hold users out.
        Self {
            mode: SplitMode::TrainValTest602020,
            holdout_fraction: 0.0,
            fold_in_fraction: 0.5,
        }
    }
}

/// One fitting recipe: a likelihood variant paired with a bias correction,
/// or the cheating predictor that reads the simulator's potential outcomes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MethodSpec {
    Fit {
        variant: Variant,
        correction: Correction,
    },
    /// Only valid with the simulate source.
    Oracle,
}

impl MethodSpec {
    #[must_use]
    pub fn method_name(&self) -> String {
        match self {
            MethodSpec::Fit { variant, .. } => variant.to_string(),
            MethodSpec::Oracle => "oracle".into(),
        }
    }

    #[must_use]
    pub fn correction_name(&self) -> String {
        match self {
            MethodSpec::Fit { correction, .. } => correction.to_string(),
            MethodSpec::Oracle => "-".into(),
        }
    }

    pub(crate) fn token(&self) -> String {
        match self {
            MethodSpec::Fit {
                variant,
                correction,
            } => format!("{variant}/{correction}"),
            MethodSpec::Oracle => "oracle".into(),
        }
    }

    fn parse(token: &str) -> Result<Self> {
        let token = token.trim();
        if token == "oracle" {
            return Ok(MethodSpec::Oracle);
        }
        let (v, c) = token.split_once('/').ok_or_else(|| {
            Error::InvalidConfig(format!(
                "method {token:?} is not `oracle` or `variant/correction`"
            ))
        })?;
        Ok(MethodSpec::Fit {
            variant: v.trim().parse()?,
            correction: c.trim().parse()?,
        })
    }
}

/// Hyperparameter grid searched per method on validation NDCG.
///
/// The outcome dimension and prior scale apply to every fitted method; the
/// exposure-model dimension axis only multiplies the grid for deconfounded
/// methods, which are the only ones that fit an exposure model.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub outcome_k: Vec<usize>,
    pub prior_std: Vec<f64>,
    pub pf_k: Vec<usize>,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            outcome_k: vec![10, 50],
            prior_std: vec![1.0, 0.1],
            pf_k: vec![10, 50],
        }
    }
}

/// Outcome-model fitting knobs shared by every method and grid point.
#[derive(Debug, Clone, PartialEq)]
pub struct OutcomeKnobs {
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub tol: f64,
    pub sigma2: f64,
    pub alpha_weight: f64,
    pub prior_std_gamma: f64,
    pub prior_std_intercept: f64,
    pub fit_intercept: bool,
    pub poisson_link: PoissonLink,
}

impl Default for OutcomeKnobs {
    fn default() -> Self {
        let d = OutcomeConfig::default();
        Self {
            learning_rate: d.learning_rate,
            max_epochs: d.max_epochs,
            tol: d.tol,
            sigma2: d.sigma2,
            alpha_weight: d.alpha_weight,
            prior_std_gamma: d.prior_std_gamma,
            prior_std_intercept: d.prior_std_intercept,
            fit_intercept: d.fit_intercept,
            poisson_link: d.poisson_link,
        }
    }
}

/// Exposure-model fitting knobs (its latent dimension comes from the grid).
#[derive(Debug, Clone, PartialEq)]
pub struct PfKnobs {
    pub max_iters: usize,
    pub tol: f64,
    pub prior_shape: f64,
    pub prior_rate: f64,
}

impl Default for PfKnobs {
    fn default() -> Self {
        Self {
            max_iters: 300,
            tol: 1e-5,
            prior_shape: 0.3,
            prior_rate: 0.3,
        }
    }
}

/// Metric settings for validation selection and test reporting.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSpec {
    pub recall_k: usize,
    pub relevance_threshold: f64,
    pub gain: GainScheme,
    /// Clamp predictions to the dataset rating scale before computing
    /// metrics. Off by default: metrics see the raw model output.
    pub clip_predictions: bool,
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self {
            recall_k: 5,
            relevance_threshold: 3.0,
            gain: GainScheme::ExpMinusOne,
            clip_predictions: false,
        }
    }
}

/// Everything a full experiment run needs.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub source: SourceKind,
    /// World generator settings (`source = simulate`); its seed field is
    /// ignored — the experiment `seed` drives the world.
    pub sim: SimConfig,
    pub data: FileSourceSpec,
    pub split: SplitChoice,
    pub methods: Vec<MethodSpec>,
    pub grid: GridSpec,
    pub outcome: OutcomeKnobs,
    pub pf: PfKnobs,
    pub propensity: PropensityConfig,
    pub eval: EvalSpec,
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let variants = [Variant::Probabilistic, Variant::Poisson, Variant::Weighted];
        let corrections = [Correction::None, Correction::Deconfounded, Correction::Ipw];
        let methods = variants
            .iter()
            .flat_map(|&variant| {
                corrections
                    .iter()
                    .map(move |&correction| MethodSpec::Fit {
                        variant,
                        correction,
                    })
            })
            .collect();
        Self {
            source: SourceKind::Simulate,
            sim: SimConfig::default(),
            data: FileSourceSpec::default(),
            split: SplitChoice::default(),
            methods,
            grid: GridSpec::default(),
            outcome: OutcomeKnobs::default(),
            pf: PfKnobs::default(),
            propensity: PropensityConfig::default(),
            eval: EvalSpec::default(),
            seed: 0,
            output_dir: None,
        }
    }
}

impl ExperimentConfig {
    /// Checks cross-field consistency; called by the runner before work.
    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::InvalidConfig("at least one method required".into()));
        }
        for (i, m) in self.methods.iter().enumerate() {
            if self.methods[..i].contains(m) {
                return Err(Error::InvalidConfig(format!(
                    "method {} requested twice",
                    m.token()
                )));
            }
        }
        if self.split.mode == SplitMode::ProvidedRandomTest {
            return Err(Error::InvalidConfig(
                "set data_test_path to attach a randomized test set; the split mode follows".into(),
            ));
        }
        if self.split.mode == SplitMode::TrainVal8020
            && self.split.holdout_fraction == 0.0
            && self.data.test_path.is_none()
        {
            return Err(Error::InvalidConfig(
                "an 80/20 split leaves no test fold: use 60/20/20, hold users out, \
                 or attach a randomized test set"
                    .into(),
            ));
        }
        if self.grid.outcome_k.is_empty() || self.grid.prior_std.is_empty() {
            return Err(Error::InvalidConfig(
                "hyperparameter grid must be nonempty".into(),
            ));
        }
        let needs_pf_grid = self
            .methods
            .iter()
            .any(|m| matches!(m, MethodSpec::Fit { correction: Correction::Deconfounded, .. }));
        if needs_pf_grid && self.grid.pf_k.is_empty() {
            return Err(Error::InvalidConfig(
                "deconfounded methods need a nonempty grid_pf_k".into(),
            ));
        }
        for &k in self.grid.outcome_k.iter().chain(&self.grid.pf_k) {
            if k < 1 {
                return Err(Error::InvalidConfig(
                    "grid latent dimensions must be >= 1".into(),
                ));
            }
        }
        for &s in &self.grid.prior_std {
            if !(s > 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "grid prior stds must be positive, got {s}"
                )));
            }
        }
        match self.source {
            SourceKind::File => {
                if self.data.path.is_none() {
                    return Err(Error::InvalidConfig(
                        "source = file requires data_path".into(),
                    ));
                }
                if self.methods.contains(&MethodSpec::Oracle) {
                    return Err(Error::InvalidConfig(
                        "the oracle method needs the simulate source".into(),
                    ));
                }
            }
            SourceKind::Simulate => {}
        }
        if self.data.rating_min.is_some() != self.data.rating_max.is_some() {
            return Err(Error::InvalidConfig(
                "rating_min and rating_max must be set together".into(),
            ));
        }
        if self.data.test_path.is_some() && self.split.mode != SplitMode::TrainVal8020 {
            return Err(Error::InvalidConfig(
                "an attached test set fixes the split to 80/20 train/validation".into(),
            ));
        }
        for (name, v) in [
            ("holdout_fraction", self.split.holdout_fraction),
            ("fold_in_fraction", self.split.fold_in_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidConfig(format!(
                    "{name} must lie in [0, 1], got {v}"
                )));
            }
        }
        if self.eval.recall_k < 1 {
            return Err(Error::InvalidConfig("recall_k must be >= 1".into()));
        }
        // Per-field numeric checks ride on the component validators.
        self.outcome_config(
            Variant::Probabilistic,
            Correction::None,
            self.grid.outcome_k[0],
            self.grid.prior_std[0],
        )
        .validate()?;
        Ok(())
    }

    /// The outcome configuration for one method at one grid point.
    #[must_use]
    pub fn outcome_config(
        &self,
        variant: Variant,
        correction: Correction,
        outcome_k: usize,
        prior_std: f64,
    ) -> OutcomeConfig {
        OutcomeConfig {
            variant,
            correction,
            k: outcome_k,
            prior_std_theta_beta: prior_std,
            prior_std_gamma: self.outcome.prior_std_gamma,
            prior_std_intercept: self.outcome.prior_std_intercept,
            sigma2: self.outcome.sigma2,
            alpha_weight: self.outcome.alpha_weight,
            learning_rate: self.outcome.learning_rate,
            max_epochs: self.outcome.max_epochs,
            tol: self.outcome.tol,
            seed: self.seed,
            fit_intercept: self.outcome.fit_intercept,
            poisson_link: self.outcome.poisson_link,
        }
    }

    /// The exposure-model configuration at one grid dimension.
    #[must_use]
    pub fn pf_config(&self, pf_k: usize) -> crate::pf::PFConfig {
        crate::pf::PFConfig {
            k: pf_k,
            c1: self.pf.prior_shape,
            c2: self.pf.prior_rate,
            c3: self.pf.prior_shape,
            c4: self.pf.prior_rate,
            max_iters: self.pf.max_iters,
            tol: self.pf.tol,
            seed: self.seed,
        }
    }
}

fn delimiter_token(c: char) -> String {
    match c {
        '\t' => "tab".into(),
        ',' => "comma".into(),
        ' ' => "space".into(),
        ';' => "semicolon".into(),
        '|' => "pipe".into(),
        other => other.to_string(),
    }
}

fn parse_delimiter(v: &str) -> Result<char> {
    match v {
        "tab" => Ok('\t'),
        "comma" => Ok(','),
        "space" => Ok(' '),
        "semicolon" => Ok(';'),
        "pipe" => Ok('|'),
        s if s.chars().count() == 1 => Ok(s.chars().next().unwrap()),
        other => Err(Error::InvalidConfig(format!(
            "delimiter {other:?} is neither a name (tab/comma/space/semicolon/pipe) nor a single character"
        ))),
    }
}

fn split_token(mode: SplitMode) -> &'static str {
    match mode {
        SplitMode::TrainVal8020 | SplitMode::ProvidedRandomTest => "80/20",
        SplitMode::TrainValTest602020 => "60/20/20",
    }
}

fn gain_token(g: GainScheme) -> &'static str {
    match g {
        GainScheme::ExpMinusOne => "exp_minus_one",
        GainScheme::LiteralPaper => "literal_paper",
    }
}

/// Renders every field as `key = value` lines in a fixed order.
///
/// Feeding the output back through [`parse_experiment_config`] reproduces
/// the config, and [`config_hash`] digests exactly this text.
#[must_use]
pub fn canonical_text(cfg: &ExperimentConfig) -> String {
    let mut out = String::new();
    let mut kv = |k: &str, v: String| {
        out.push_str(k);
        out.push_str(" = ");
        out.push_str(&v);
        out.push('\n');
    };
    let opt_path = |p: &Option<PathBuf>| {
        p.as_ref()
            .map(|p| p.display().to_string())
            .unwrap_or_default()
    };
    let floats = |v: &[f64]| {
        v.iter()
            .map(|f| format!("{f:?}"))
            .collect::<Vec<_>>()
            .join(",")
    };
    let usizes = |v: &[usize]| {
        v.iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join(",")
    };

    kv(
        "source",
        match cfg.source {
            SourceKind::Simulate => "simulate".into(),
            SourceKind::File => "file".into(),
        },
    );
    kv("data_path", opt_path(&cfg.data.path));
    kv("data_test_path", opt_path(&cfg.data.test_path));
    kv("data_delimiter", delimiter_token(cfg.data.delimiter));
    kv("data_user_col", cfg.data.user_col.to_string());
    kv("data_item_col", cfg.data.item_col.to_string());
    kv("data_rating_col", cfg.data.rating_col.to_string());
    kv("data_index_base", cfg.data.index_base.to_string());
    kv("data_header_rows", cfg.data.header_rows.to_string());
    kv(
        "rating_min",
        cfg.data.rating_min.map(|v| format!("{v:?}")).unwrap_or_default(),
    );
    kv(
        "rating_max",
        cfg.data.rating_max.map(|v| format!("{v:?}")).unwrap_or_default(),
    );
    kv("sim_users", cfg.sim.n_users.to_string());
    kv("sim_items", cfg.sim.n_items.to_string());
    kv("sim_k", cfg.sim.k.to_string());
    kv("sim_gamma_theta", format!("{:?}", cfg.sim.gamma_theta));
    kv("sim_gamma_y", format!("{:?}", cfg.sim.gamma_y));
    kv("sim_gamma_shape", format!("{:?}", cfg.sim.gamma_shape));
    kv("sim_gamma_rate", format!("{:?}", cfg.sim.gamma_rate));
    kv("split", split_token(cfg.split.mode).into());
    kv(
        "holdout_fraction",
        format!("{:?}", cfg.split.holdout_fraction),
    );
    kv(
        "fold_in_fraction",
        format!("{:?}", cfg.split.fold_in_fraction),
    );
    kv(
        "methods",
        cfg.methods
            .iter()
            .map(MethodSpec::token)
            .collect::<Vec<_>>()
            .join(","),
    );
    kv("grid_outcome_k", usizes(&cfg.grid.outcome_k));
    kv("grid_prior_std", floats(&cfg.grid.prior_std));
    kv("grid_pf_k", usizes(&cfg.grid.pf_k));
    kv("learning_rate", format!("{:?}", cfg.outcome.learning_rate));
    kv("max_epochs", cfg.outcome.max_epochs.to_string());
    kv("tol", format!("{:?}", cfg.outcome.tol));
    kv("sigma2", format!("{:?}", cfg.outcome.sigma2));
    kv("alpha_weight", format!("{:?}", cfg.outcome.alpha_weight));
    kv(
        "prior_std_gamma",
        format!("{:?}", cfg.outcome.prior_std_gamma),
    );
    kv(
        "prior_std_intercept",
        format!("{:?}", cfg.outcome.prior_std_intercept),
    );
    kv("fit_intercept", cfg.outcome.fit_intercept.to_string());
    kv("poisson_link", cfg.outcome.poisson_link.to_string());
    kv("pf_max_iters", cfg.pf.max_iters.to_string());
    kv("pf_tol", format!("{:?}", cfg.pf.tol));
    kv("pf_prior_shape", format!("{:?}", cfg.pf.prior_shape));
    kv("pf_prior_rate", format!("{:?}", cfg.pf.prior_rate));
    kv("prop_alpha", format!("{:?}", cfg.propensity.alpha));
    kv(
        "prop_target_mean",
        format!("{:?}", cfg.propensity.target_mean),
    );
    kv(
        "prop_high_threshold",
        format!("{:?}", cfg.propensity.high_threshold),
    );
    kv("prop_floor", format!("{:?}", cfg.propensity.floor));
    kv("recall_k", cfg.eval.recall_k.to_string());
    kv(
        "relevance_threshold",
        format!("{:?}", cfg.eval.relevance_threshold),
    );
    kv("gain", gain_token(cfg.eval.gain).into());
    kv("clip_predictions", cfg.eval.clip_predictions.to_string());
    kv("seed", cfg.seed.to_string());
    kv("output_dir", opt_path(&cfg.output_dir));
    out
}

/// Hex SHA-256 of the canonical config text.
#[must_use]
pub fn config_hash(cfg: &ExperimentConfig) -> String {
    let digest = Sha256::digest(canonical_text(cfg).as_bytes());
    let mut out = String::with_capacity(64);
    for byte in digest {
        out.push_str(&format!("{byte:02x}"));
    }
    out
}

/// Applies one `key = value` override in place.
pub fn apply_override(cfg: &mut ExperimentConfig, key: &str, value: &str) -> Result<()> {
    let value = value.trim();
    let bad = |what: &str| Error::InvalidConfig(format!("{key}: {what}: {value:?}"));
    macro_rules! num {
        ($t:ty, $what:expr) => {
            value.parse::<$t>().map_err(|_| bad($what))?
        };
    }
    let parse_usize_list = |v: &str| -> Result<Vec<usize>> {
        v.split(',')
            .map(|t| t.trim().parse::<usize>().map_err(|_| bad("not a count list")))
            .collect()
    };
    let parse_float_list = |v: &str| -> Result<Vec<f64>> {
        v.split(',')
            .map(|t| t.trim().parse::<f64>().map_err(|_| bad("not a number list")))
            .collect()
    };

    match key {
        "source" => {
            cfg.source = match value {
                "simulate" => SourceKind::Simulate,
                "file" => SourceKind::File,
                _ => return Err(bad("expected simulate or file")),
            }
        }
        "data_path" => {
            cfg.data.path = (!value.is_empty()).then(|| PathBuf::from(value));
        }
        "data_test_path" => {
            cfg.data.test_path = (!value.is_empty()).then(|| PathBuf::from(value));
        }
        "data_delimiter" => cfg.data.delimiter = parse_delimiter(value)?,
        "data_user_col" => cfg.data.user_col = num!(usize, "not a column index"),
        "data_item_col" => cfg.data.item_col = num!(usize, "not a column index"),
        "data_rating_col" => cfg.data.rating_col = num!(usize, "not a column index"),
        "data_index_base" => cfg.data.index_base = num!(i64, "not an integer"),
        "data_header_rows" => cfg.data.header_rows = num!(usize, "not a count"),
        "rating_min" => {
            cfg.data.rating_min = if value.is_empty() {
                None
            } else {
                Some(num!(f64, "not a number"))
            }
        }
        "rating_max" => {
            cfg.data.rating_max = if value.is_empty() {
                None
            } else {
                Some(num!(f64, "not a number"))
            }
        }
        "sim_users" => cfg.sim.n_users = num!(usize, "not a count"),
        "sim_items" => cfg.sim.n_items = num!(usize, "not a count"),
        "sim_k" => cfg.sim.k = num!(usize, "not a count"),
        "sim_gamma_theta" => cfg.sim.gamma_theta = num!(f64, "not a number"),
        "sim_gamma_y" => cfg.sim.gamma_y = num!(f64, "not a number"),
        "sim_gamma_shape" => cfg.sim.gamma_shape = num!(f64, "not a number"),
        "sim_gamma_rate" => cfg.sim.gamma_rate = num!(f64, "not a number"),
        "split" => {
            cfg.split.mode = match value {
                "80/20" => SplitMode::TrainVal8020,
                "60/20/20" => SplitMode::TrainValTest602020,
                _ => return Err(bad("expected 80/20 or 60/20/20")),
            }
        }
        "generalization" => match value {
            // Sugar over holdout_fraction; an explicit holdout_fraction
            // later in the file refines the strong default.
            "weak" => cfg.split.holdout_fraction = 0.0,
            "strong" => {
                if cfg.split.holdout_fraction == 0.0 {
                    cfg.split.holdout_fraction = 0.2;
                }
            }
            _ => return Err(bad("expected weak or strong")),
        },
        "holdout_fraction" => cfg.split.holdout_fraction = num!(f64, "not a number"),
        "fold_in_fraction" => cfg.split.fold_in_fraction = num!(f64, "not a number"),
        "methods" => {
            cfg.methods = if value == "all" {
                ExperimentConfig::default().methods
            } else {
                value
                    .split(',')
                    .map(MethodSpec::parse)
                    .collect::<Result<_>>()?
            }
        }
        "grid_outcome_k" => cfg.grid.outcome_k = parse_usize_list(value)?,
        "grid_prior_std" => cfg.grid.prior_std = parse_float_list(value)?,
        "grid_pf_k" => cfg.grid.pf_k = parse_usize_list(value)?,
        "learning_rate" => cfg.outcome.learning_rate = num!(f64, "not a number"),
        "max_epochs" => cfg.outcome.max_epochs = num!(usize, "not a count"),
        "tol" => cfg.outcome.tol = num!(f64, "not a number"),
        "sigma2" => cfg.outcome.sigma2 = num!(f64, "not a number"),
        "alpha_weight" => cfg.outcome.alpha_weight = num!(f64, "not a number"),
        "prior_std_gamma" => cfg.outcome.prior_std_gamma = num!(f64, "not a number"),
        "prior_std_intercept" => cfg.outcome.prior_std_intercept = num!(f64, "not a number"),
        "fit_intercept" => cfg.outcome.fit_intercept = num!(bool, "not true/false"),
        "poisson_link" => cfg.outcome.poisson_link = value.parse()?,
        "pf_max_iters" => cfg.pf.max_iters = num!(usize, "not a count"),
        "pf_tol" => cfg.pf.tol = num!(f64, "not a number"),
        "pf_prior_shape" => cfg.pf.prior_shape = num!(f64, "not a number"),
        "pf_prior_rate" => cfg.pf.prior_rate = num!(f64, "not a number"),
        "prop_alpha" => cfg.propensity.alpha = num!(f64, "not a number"),
        "prop_target_mean" => cfg.propensity.target_mean = num!(f64, "not a number"),
        "prop_high_threshold" => cfg.propensity.high_threshold = num!(f64, "not a number"),
        "prop_floor" => cfg.propensity.floor = num!(f64, "not a number"),
        "recall_k" => cfg.eval.recall_k = num!(usize, "not a count"),
        "relevance_threshold" => cfg.eval.relevance_threshold = num!(f64, "not a number"),
        "gain" => {
            cfg.eval.gain = match value {
                "exp_minus_one" => GainScheme::ExpMinusOne,
                "literal_paper" => GainScheme::LiteralPaper,
                _ => return Err(bad("expected exp_minus_one or literal_paper")),
            }
        }
        "clip_predictions" => cfg.eval.clip_predictions = num!(bool, "not true/false"),
        "seed" => cfg.seed = num!(u64, "not an unsigned integer"),
        "output_dir" => {
            cfg.output_dir = (!value.is_empty()).then(|| PathBuf::from(value));
        }
        other => {
            return Err(Error::InvalidConfig(format!(
                "unknown config key {other:?}"
            )))
        }
    }
    Ok(())
}

/// Parses a flat config file body on top of the defaults.
pub fn parse_experiment_config(text: &str) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    for (line_no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::InvalidConfig(format!(
                "line {}: expected `key = value`, got {raw:?}",
                line_no + 1
            ))
        })?;
        apply_override(&mut cfg, key.trim(), value)
            .map_err(|e| Error::InvalidConfig(format!("line {}: {e}", line_no + 1)))?;
    }
    Ok(cfg)
}
