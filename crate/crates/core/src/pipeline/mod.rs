//! End-to-end driver: load, fit, match, diagnose, estimate, report.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 invalid config or input,
//! 3 post-design imbalance under `strict`.

mod config;
mod report;

pub use config::{
    DesignConfig, DistanceConfig, EstimatorConfig, EstimatorKind, MatcherSpec, OrderSpec, PipelineConfig,
    PropensityConfig,
};
pub use report::{Bundle, DataSummary, MatchSummary, PropensityOut, Report, SCHEMA_VERSION};

use std::path::Path;

use serde::Serialize;
use thiserror::Error;

use crate::dataset::{self, DatasetError, StudyFrame};
use crate::diagnostics::{self, DiagnosticsError};
use crate::distance::{self, DistanceError, DistanceKind, DistanceSpec};
use crate::estimation::{self, EffectEstimate, EstimationError};
use crate::matchers::{self, MatchError, MatchOrder, MatchResult, Subclassification};
use crate::propensity::{self, PropensityError, PropensityModel};
use crate::weighting::{self, WeightError};
use crate::Estimand;

pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_INVALID: i32 = 2;
pub const EXIT_IMBALANCE: i32 = 3;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Propensity(#[from] PropensityError),
    #[error(transparent)]
    Distance(#[from] DistanceError),
    #[error(transparent)]
    Match(#[from] MatchError),
    #[error(transparent)]
    Weight(#[from] WeightError),
    #[error(transparent)]
    Diagnostics(#[from] DiagnosticsError),
    #[error(transparent)]
    Estimation(#[from] EstimationError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Serialize)]
struct ErrorBody<'a> {
    code: i32,
    kind: &'a str,
    message: String,
}

impl PipelineError {
    pub fn code(&self) -> i32 {
        match self {
            PipelineError::Config(_) | PipelineError::Dataset(_) => EXIT_INVALID,
            _ => EXIT_RUNTIME,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            PipelineError::Config(_) => "config",
            PipelineError::Dataset(_) => "data",
            PipelineError::Propensity(_) => "propensity",
            PipelineError::Distance(_) => "distance",
            PipelineError::Match(_) => "match",
            PipelineError::Weight(_) => "weight",
            PipelineError::Diagnostics(_) => "diagnostics",
            PipelineError::Estimation(_) => "estimation",
            PipelineError::Io(_) => "io",
        }
    }

    /// `{"error": {"code", "kind", "message"}}`
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "error": ErrorBody { code: self.code(), kind: self.kind(), message: self.to_string() }
        })
    }
}

/// Share of units outside the other arm's score range above which
/// [`guidance_check`] reports `poor_overlap`.
pub const POOR_OVERLAP_SHARE: f64 = 0.05;

/// A design-stage advisory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Advisory {
    pub code: &'static str,
    pub message: String,
}

/// Method-choice advice for the data at hand, plus overlap warnings when a
/// propensity model is available.
pub fn guidance_check(cfg: &DesignConfig, frame: &StudyFrame, model: Option<&PropensityModel>) -> Vec<Advisory> {
    let mut out = Vec::new();
    let (nt, nc) = (frame.n_treated(), frame.n_control());
    let m = &cfg.matcher;
    match cfg.estimand {
        Estimand::Att if nc > 3 * nt => {
            if !matches!(m, MatcherSpec::Greedy { .. } | MatcherSpec::Optimal { .. }) {
                out.push(Advisory {
                    code: "suggest_knn",
                    message: format!(
                        "{nc} controls for {nt} treated units (more than 3 per treated unit): \
                         k:1 nearest-neighbor matching is usually a good choice for the ATT"
                    ),
                });
            }
        }
        Estimand::Att => {
            if !matches!(m, MatcherSpec::Full { .. } | MatcherSpec::Odds { .. }) {
                out.push(Advisory {
                    code: "suggest_full_or_odds",
                    message: format!(
                        "only {nc} controls for {nt} treated units: full matching or weighting by \
                         the odds makes better use of the controls for the ATT"
                    ),
                });
            }
        }
        Estimand::Ate => {
            if !matches!(m, MatcherSpec::Iptw { .. } | MatcherSpec::Full { .. }) {
                out.push(Advisory {
                    code: "suggest_iptw_or_full",
                    message: "for the ATE, inverse probability of treatment weighting or full \
                              matching are generally good choices"
                        .into(),
                });
            }
        }
    }
    if let Some(model) = model {
        let range = |treated: bool| {
            (0..frame.n_units())
                .filter(|&u| frame.is_treated(u) == treated)
                .map(|u| model.scores[u])
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| (lo.min(s), hi.max(s)))
        };
        let (tl, th) = range(true);
        let (cl, ch) = range(false);
        if th < cl || ch < tl {
            out.push(Advisory {
                code: "no_overlap",
                message: format!(
                    "propensity-score ranges do not overlap (treated [{tl:.4}, {th:.4}], \
                     control [{cl:.4}, {ch:.4}]); no comparison is supported by the data"
                ),
            });
        } else {
            let outside = (0..frame.n_units())
                .filter(|&u| {
                    let s = model.scores[u];
                    if frame.is_treated(u) {
                        s < cl || s > ch
                    } else {
                        s < tl || s > th
                    }
                })
                .count();
            // A few extreme units fall outside by chance even under identical
            // distributions, so only a sizeable share triggers the warning.
            if outside as f64 > POOR_OVERLAP_SHARE * frame.n_units() as f64 {
                out.push(Advisory {
                    code: "poor_overlap",
                    message: format!(
                        "{outside} units lie outside the other group's propensity-score range; \
                         consider common-support trimming"
                    ),
                });
            }
        }
    }
    out
}

/// Result of the design stage.
#[derive(Debug, Clone)]
pub struct DesignOutput {
    /// Working frame: imputed and expanded with any added model terms.
    pub frame: StudyFrame,
    pub model: Option<PropensityModel>,
    pub result: MatchResult,
    pub subclasses: Option<Subclassification>,
    /// Covariates the balance diagnostics report on.
    pub covariates: Vec<String>,
    pub respecify_rounds: usize,
}

fn needs_model(cfg: &DesignConfig) -> bool {
    cfg.common_support
        || cfg.distance_kind().needs_model()
        || matches!(
            cfg.matcher,
            MatcherSpec::Subclass { .. }
                | MatcherSpec::Iptw { .. }
                | MatcherSpec::Odds { .. }
                | MatcherSpec::Greedy { order: OrderSpec::DescendingPropensity, .. }
        )
}

fn fit_model(frame: &StudyFrame, cfg: &DesignConfig, base: &[String]) -> Result<(StudyFrame, PropensityModel), PipelineError> {
    let p = &cfg.propensity;
    let cols = if p.covariates.is_empty() { base.to_vec() } else { p.covariates.clone() };
    let expanded = dataset::expand_terms(frame, &p.squares, &p.interactions)?;
    let mut columns = cols;
    for name in p
        .squares
        .iter()
        .map(|s| dataset::square_name(s))
        .chain(p.interactions.iter().map(|(a, b)| dataset::interaction_name(a, b)))
    {
        if !columns.contains(&name) {
            columns.push(name);
        }
    }
    let model = propensity::fit_logistic(&expanded, &columns, &p.fit_options())?;
    Ok((expanded, model))
}

fn distance_spec(cfg: &DesignConfig, base: &[String]) -> DistanceSpec {
    let mut spec = DistanceSpec::new(cfg.distance_kind(), cfg.estimand);
    if let Some(src) = cfg.distance.sigma_source {
        spec.sigma_source = src;
    }
    spec.caliper_sd = Some(cfg.distance.caliper_sd);
    spec.key_columns = Some(if cfg.distance.key_columns.is_empty() {
        base.to_vec()
    } else {
        cfg.distance.key_columns.clone()
    });
    spec.coarsen_bins = cfg.distance.coarsen_bins.clone();
    spec
}

fn match_once(
    frame: &StudyFrame,
    cfg: &DesignConfig,
    model: Option<&PropensityModel>,
    base: &[String],
    seed: u64,
) -> Result<(MatchResult, Option<Subclassification>), PipelineError> {
    let trimmed = match (cfg.common_support, model) {
        (true, Some(m)) => Some(matchers::trim_common_support(m, frame, cfg.estimand)?),
        _ => None,
    };
    let model_of = || model.ok_or(PipelineError::Distance(DistanceError::MissingModel(cfg.distance_kind())));
    let matrix = || -> Result<distance::DistanceMatrix, PipelineError> {
        let d = distance::build_matrix(frame, &distance_spec(cfg, base), model)?;
        Ok(match &trimmed {
            Some(t) => d.restrict(t),
            None => d,
        })
    };
    let score_sd = |kind: DistanceKind| -> Option<f64> {
        let m = model?;
        match kind {
            DistanceKind::LinearPropensity => Some(crate::linalg::sample_sd(&m.linear_scores)),
            DistanceKind::Propensity => Some(crate::linalg::sample_sd(&m.scores)),
            _ => None,
        }
    };
    let (mut result, sub) = match &cfg.matcher {
        MatcherSpec::Greedy {
            k,
            with_replacement,
            caliper,
            order,
        } => {
            let kind = cfg.distance_kind();
            let caliper = caliper.map(|c| score_sd(kind).map_or(c, |sd| c * sd));
            let opts = matchers::GreedyOptions {
                k: *k,
                with_replacement: *with_replacement,
                caliper,
                order: match order {
                    OrderSpec::DescendingPropensity => MatchOrder::DescendingPropensity,
                    OrderSpec::Index => MatchOrder::Index,
                    OrderSpec::Random => MatchOrder::Random { seed },
                },
            };
            let scores = model.map(|m| m.scores.as_slice());
            (matchers::greedy_nn(&matrix()?, &opts, scores)?, None)
        }
        MatcherSpec::Optimal { k } => (matchers::optimal_pair(&matrix()?, *k)?, None),
        MatcherSpec::Full { min_ratio, max_ratio } => {
            let opts = matchers::FullMatchOptions {
                min_ratio: *min_ratio,
                max_ratio: *max_ratio,
            };
            (matchers::full_match(&matrix()?, &opts, cfg.estimand)?, None)
        }
        MatcherSpec::Subclass { n_subclasses } => {
            let keep: Option<Vec<bool>> = trimmed.as_ref().map(|t| t.iter().map(|x| !x).collect());
            let sub = matchers::subclassify(model_of()?, frame, *n_subclasses, cfg.estimand, keep.as_deref())?;
            (sub.to_match_result(frame)?, Some(sub))
        }
        MatcherSpec::Exact => {
            let keys = distance_spec(cfg, base).key_columns.unwrap_or_default();
            let mut sub = matchers::exact_subclasses(frame, &keys, cfg.distance.coarsen_bins.as_ref(), cfg.estimand)?;
            if let Some(t) = &trimmed {
                for (s, &drop) in sub.subclass_of.iter_mut().zip(t) {
                    if drop {
                        *s = None;
                    }
                }
            }
            let mut r = sub.to_match_result(frame)?;
            r.method.method = "exact".into();
            (r, Some(sub))
        }
        MatcherSpec::Iptw { trim, clamp } | MatcherSpec::Odds { trim, clamp } => {
            let m = model_of()?;
            let w = if matches!(cfg.matcher, MatcherSpec::Iptw { .. }) {
                weighting::iptw(m, frame, trimmed.as_deref(), *clamp)?
            } else {
                weighting::odds_weights(m, frame, trimmed.as_deref(), *clamp)?
            };
            let w = match trim {
                Some(cap) => weighting::trim(&w, *cap),
                None => w,
            };
            (weighting::weighting_result(&w, frame, trimmed.as_deref()), None)
        }
    };
    if let Some(t) = &trimmed {
        result.mark_common_support(t);
    }
    Ok((result, sub))
}

/// Runs the design stage. `true_scores` replaces the fitted propensity model
/// (simulation studies only); respecification is skipped in that case.
pub fn run_design(
    frame: &StudyFrame,
    cfg: &DesignConfig,
    true_scores: Option<&[f64]>,
    seed: u64,
) -> Result<DesignOutput, PipelineError> {
    cfg.validate()?;
    frame.check_arms()?;
    let frame = if cfg.impute_missing {
        dataset::impute_with_indicators(frame)?
    } else {
        frame.clone()
    };
    let base = frame.covariates.names();
    for c in &base {
        frame.observed(c)?;
    }
    let (mut frame, mut model) = match true_scores {
        Some(s) => (frame, Some(PropensityModel::from_scores(s.to_vec()))),
        None if needs_model(cfg) => {
            let (f, m) = fit_model(&frame, cfg, &base)?;
            (f, Some(m))
        }
        // Scores are still wanted for diagnostics; the design does not use them.
        None => match fit_model(&frame, cfg, &base) {
            Ok((f, m)) => (f, Some(m)),
            Err(_) => (frame, None),
        },
    };
    let (mut result, mut subclasses) = match_once(&frame, cfg, model.as_ref(), &base, seed)?;
    let mut rounds = 0;
    if true_scores.is_none() && needs_model(cfg) {
        let threshold = cfg.propensity.respecify_threshold;
        while rounds < cfg.propensity.respecify_rounds {
            let Some(m) = model.as_ref() else { break };
            let balance = diagnostics::balance_report(&frame, Some(m), &base, &result.unit_weight)?;
            if balance.max_abs_std_diff_post() <= threshold {
                break;
            }
            let (f2, m2) = propensity::respecify(&frame, m, &balance, threshold, &cfg.propensity.fit_options())?;
            if m2.added_terms.len() == m.added_terms.len() {
                break;
            }
            let (r2, s2) = match_once(&f2, cfg, Some(&m2), &base, seed)?;
            frame = f2;
            model = Some(m2);
            result = r2;
            subclasses = s2;
            rounds += 1;
        }
    }
    Ok(DesignOutput {
        frame,
        model,
        result,
        subclasses,
        covariates: base,
        respecify_rounds: rounds,
    })
}

/// Outcome analysis on a finished design.
pub fn estimate(design: &DesignOutput, cfg: &PipelineConfig) -> Result<EffectEstimate, PipelineError> {
    let covs = cfg.estimator.covariates.clone().unwrap_or_else(|| design.covariates.clone());
    let covs: &[String] = match cfg.estimator.kind {
        EstimatorKind::DiffInMeans => &[],
        EstimatorKind::Adjusted => &covs,
    };
    let est = match &design.subclasses {
        Some(sub) if matches!(cfg.design.matcher, MatcherSpec::Subclass { .. }) => {
            estimation::subclass_effect(&design.frame, sub, covs, cfg.estimator.subclass_mode)?
        }
        _ => match cfg.estimator.kind {
            EstimatorKind::DiffInMeans => {
                estimation::diff_in_means(&design.frame, &design.result.unit_weight, cfg.design.estimand)?
            }
            EstimatorKind::Adjusted => {
                estimation::adjusted_effect(&design.frame, &design.result.unit_weight, covs, cfg.design.estimand)?
            }
        },
    };
    Ok(est.with_matcher(&design.result.method.method))
}

/// Loads the configured data. In design-only mode the outcome column is not
/// parsed at all.
pub fn load_frame(cfg: &PipelineConfig) -> Result<StudyFrame, PipelineError> {
    let path = cfg.data.as_ref().ok_or_else(|| PipelineError::Config("no data file given".into()))?;
    let mut roles = cfg.columns.clone();
    if cfg.design_only {
        roles.ignore.extend(roles.outcome.take());
    }
    let frame = dataset::load_csv(path, &roles)?;
    Ok(frame)
}

/// Builds the full report bundle in memory for an already loaded frame.
pub fn build_bundle(cfg: &PipelineConfig, frame: &StudyFrame) -> Result<Bundle, PipelineError> {
    cfg.validate()?;
    let design = run_design(frame, &cfg.design, None, cfg.seed)?;
    let balance = diagnostics::balance_report(
        &design.frame,
        design.model.as_ref(),
        &design.covariates,
        &design.result.unit_weight,
    )?;
    let advisories = guidance_check(&cfg.design, &design.frame, design.model.as_ref());
    let effect = if cfg.design_only {
        None
    } else if cfg.bootstrap >= 2 {
        let design_cfg = cfg.design.clone();
        let est = estimation::bootstrap_se(frame, cfg.bootstrap, cfg.seed, |f: &StudyFrame| {
            let d = run_design(f, &design_cfg, None, cfg.seed)?;
            estimate(&d, cfg)
        })?;
        Some(est)
    } else {
        Some(estimate(&design, cfg)?)
    };
    Ok(report::assemble(cfg, &design, balance, advisories, effect))
}

/// Outcome of a pipeline run.
#[derive(Debug)]
pub struct RunOutcome {
    pub bundle: Bundle,
    /// 0, or [`EXIT_IMBALANCE`] when `strict` is set and balance fails.
    pub exit_code: i32,
}

/// Validates, loads, designs, estimates, and writes the bundle to `cfg.out`
/// when set.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<RunOutcome, PipelineError> {
    cfg.validate()?;
    let frame = load_frame(cfg)?;
    let bundle = build_bundle(cfg, &frame)?;
    if let Some(out) = &cfg.out {
        bundle.write(Path::new(out), cfg.plots)?;
    }
    let exit_code = if cfg.strict && bundle.report.imbalanced { EXIT_IMBALANCE } else { 0 };
    Ok(RunOutcome { bundle, exit_code })
}

/// Mapping-in, mapping-out entry point for embedding: takes the config as a
/// JSON value and returns the report as a JSON value. Files are written only
/// when the config names an output directory.
pub fn run_json(config: serde_json::Value) -> Result<serde_json::Value, PipelineError> {
    let cfg = PipelineConfig::from_json(config)?;
    let outcome = run_pipeline(&cfg)?;
    serde_json::to_value(&outcome.bundle.report).map_err(|e| PipelineError::Config(e.to_string()))
}
