use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::Serialize;

use super::{Advisory, DesignOutput, PipelineConfig};
use crate::dataset::StudyFrame;
use crate::diagnostics::{self, BalanceReport};
use crate::estimation::{kish_n, EffectEstimate};
use crate::matchers::{DiscardReason, MatchKind, MatchProvenance, MatchResult};
use crate::Estimand;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize)]
pub struct DataSummary {
    pub n_units: usize,
    pub n_treated: usize,
    pub n_control: usize,
    pub covariates: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct PropensityOut {
    /// Intercept first, then one per column.
    pub columns: Vec<String>,
    pub coefficients: Vec<f64>,
    pub aliased: Vec<String>,
    pub added_terms: Vec<String>,
    pub converged: bool,
    pub iterations: usize,
    pub deviance: f64,
    pub respecify_rounds: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct MatchSummary {
    pub kind: MatchKind,
    pub provenance: MatchProvenance,
    pub n_sets: usize,
    pub n_retained_treated: usize,
    pub n_retained_control: usize,
    pub discarded: BTreeMap<String, usize>,
    pub effective_n_treated: f64,
    pub effective_n_control: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub schema_version: u32,
    pub estimand: Estimand,
    pub config: PipelineConfig,
    pub data: DataSummary,
    pub advisories: Vec<Advisory>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub propensity: Option<PropensityOut>,
    pub matching: MatchSummary,
    pub balance: BalanceReport,
    /// Some post-design |standardized difference| exceeds the threshold.
    pub imbalanced: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub effect: Option<EffectEstimate>,
}

/// The report and its companion files, rendered in memory.
#[derive(Debug, Clone)]
pub struct Bundle {
    pub report: Report,
    pub report_json: String,
    pub balance_csv: String,
    pub weights_csv: String,
    pub jitter_svg: Option<String>,
    pub love_svg: String,
}

impl Bundle {
    pub const FILES: [&'static str; 5] = ["report.json", "balance.csv", "weights.csv", "jitter.svg", "love.svg"];

    pub fn write(&self, dir: &Path, plots: bool) -> std::io::Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.json"), &self.report_json)?;
        fs::write(dir.join("balance.csv"), &self.balance_csv)?;
        fs::write(dir.join("weights.csv"), &self.weights_csv)?;
        if plots {
            if let Some(svg) = &self.jitter_svg {
                fs::write(dir.join("jitter.svg"), svg)?;
            }
            fs::write(dir.join("love.svg"), &self.love_svg)?;
        }
        Ok(())
    }
}

fn summarize(result: &MatchResult, frame: &StudyFrame) -> MatchSummary {
    let mut discarded = BTreeMap::new();
    for r in result.discarded.iter().flatten() {
        let key = match r {
            DiscardReason::NoMatchInCaliper => "no_match_in_caliper",
            DiscardReason::CommonSupport => "common_support",
            DiscardReason::UnmatchedControl => "unmatched_control",
        };
        *discarded.entry(key.to_string()).or_insert(0) += 1;
    }
    let arm_weights = |treated: bool| -> Vec<f64> {
        (0..frame.n_units())
            .filter(|&u| frame.is_treated(u) == treated)
            .map(|u| result.unit_weight[u])
            .collect()
    };
    let retained = |treated: bool| {
        (0..frame.n_units())
            .filter(|&u| frame.is_treated(u) == treated && result.unit_weight[u] > 0.0)
            .count()
    };
    MatchSummary {
        kind: result.kind,
        provenance: result.method.clone(),
        n_sets: result.sets.len(),
        n_retained_treated: retained(true),
        n_retained_control: retained(false),
        discarded,
        effective_n_treated: kish_n(&arm_weights(true)),
        effective_n_control: kish_n(&arm_weights(false)),
    }
}

fn fmt(v: f64) -> String {
    if v.is_finite() {
        format!("{v}")
    } else {
        String::new()
    }
}

fn balance_csv(b: &BalanceReport) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    let _ = w.write_record([
        "covariate",
        "std_diff_pre",
        "std_diff_post",
        "variance_ratio_pre",
        "variance_ratio_post",
        "eqq_mean",
        "eqq_max",
        "residual_var_ratio",
        "flags",
    ]);
    for r in &b.records {
        let flags: Vec<String> = r
            .flags
            .iter()
            .map(|f| serde_json::to_value(f).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default())
            .collect();
        let _ = w.write_record([
            r.name.clone(),
            fmt(r.std_diff_pre),
            fmt(r.std_diff_post),
            fmt(r.variance_ratio_pre),
            fmt(r.variance_ratio_post),
            fmt(r.eqq_mean),
            fmt(r.eqq_max),
            fmt(r.residual_var_ratio),
            flags.join(";"),
        ]);
    }
    String::from_utf8(w.into_inner().unwrap_or_default()).unwrap_or_default()
}

fn weights_csv(result: &MatchResult, frame: &StudyFrame, scores: Option<&[f64]>) -> String {
    let mut set_of = vec![None; frame.n_units()];
    for (i, s) in result.sets.iter().enumerate() {
        for &u in s.treated.iter().chain(&s.controls) {
            set_of[u].get_or_insert(i + 1);
        }
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let _ = w.write_record(["id", "treated", "propensity", "weight", "multiplicity", "set", "discarded"]);
    for u in 0..frame.n_units() {
        let reason = match result.discarded[u] {
            Some(DiscardReason::NoMatchInCaliper) => "no_match_in_caliper",
            Some(DiscardReason::CommonSupport) => "common_support",
            Some(DiscardReason::UnmatchedControl) => "unmatched_control",
            None => "",
        };
        let _ = w.write_record([
            frame.unit_ids[u].clone(),
            frame.treatment[u].to_string(),
            scores.map_or(String::new(), |s| fmt(s[u])),
            fmt(result.unit_weight[u]),
            result.multiplicity[u].to_string(),
            set_of[u].map_or(String::new(), |s| s.to_string()),
            reason.to_string(),
        ]);
    }
    String::from_utf8(w.into_inner().unwrap_or_default()).unwrap_or_default()
}

pub(super) fn assemble(
    cfg: &PipelineConfig,
    design: &DesignOutput,
    balance: BalanceReport,
    advisories: Vec<Advisory>,
    effect: Option<EffectEstimate>,
) -> Bundle {
    let frame = &design.frame;
    let threshold = balance.thresholds.std_diff_max;
    let imbalanced = balance.records.iter().any(|r| r.std_diff_post.abs() > threshold);
    let propensity = design.model.as_ref().map(|m| PropensityOut {
        columns: std::iter::once("(intercept)".to_string()).chain(m.column_names.iter().cloned()).collect(),
        coefficients: m.coefficients.clone(),
        aliased: m.aliased.clone(),
        added_terms: m.added_terms.clone(),
        converged: m.converged,
        iterations: m.iterations,
        deviance: m.deviance,
        respecify_rounds: design.respecify_rounds,
    });
    let report = Report {
        schema_version: SCHEMA_VERSION,
        estimand: cfg.design.estimand,
        config: cfg.clone(),
        data: DataSummary {
            n_units: frame.n_units(),
            n_treated: frame.n_treated(),
            n_control: frame.n_control(),
            covariates: design.covariates.clone(),
        },
        advisories,
        propensity,
        matching: summarize(&design.result, frame),
        balance,
        imbalanced,
        effect,
    };
    let report_json = serde_json::to_string_pretty(&report).unwrap_or_default() + "\n";
    let scores = design.model.as_ref().map(|m| m.scores.as_slice());
    Bundle {
        balance_csv: balance_csv(&report.balance),
        weights_csv: weights_csv(&design.result, frame, scores),
        jitter_svg: design
            .model
            .as_ref()
            .map(|m| diagnostics::render_jitter(m, frame, &design.result, cfg.seed)),
        love_svg: diagnostics::render_love(&report.balance),
        report_json,
        report,
    }
}
