use std::fmt::Write as _;
use std::io;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::BalanceReport;
use crate::dataset::StudyFrame;
use crate::matchers::{MatchKind, MatchResult};
use crate::propensity::PropensityModel;

const WIDTH: f64 = 800.0;
const MARGIN: f64 = 150.0;
const BAND: f64 = 80.0;
const MATCHED: &str = "#1a1a1a";
const UNMATCHED: &str = "#a0a0a0";

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Jitter plot of propensity scores: one circle per unit, in four bands
/// (unmatched/matched × treated/control). Matched units are dark, discarded
/// ones grey. For weighting designs the radius grows with the unit's weight.
pub fn render_jitter(model: &PropensityModel, frame: &StudyFrame, result: &MatchResult, seed: u64) -> String {
    let bands = ["Unmatched treated", "Matched treated", "Matched control", "Unmatched control"];
    let height = BAND * bands.len() as f64 + 60.0;
    let plot_w = WIDTH - MARGIN - 20.0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let max_w = result.unit_weight.iter().copied().fold(0.0, f64::max);
    let weighted = matches!(result.kind, MatchKind::Weighting);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" viewBox="0 0 {WIDTH} {height}">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for (b, label) in bands.iter().enumerate() {
        let y = 20.0 + BAND * (b as f64 + 0.5);
        let _ = writeln!(
            s,
            r#"<text x="10" y="{y:.1}" font-family="sans-serif" font-size="12">{label}</text>"#
        );
    }
    let axis_y = 20.0 + BAND * bands.len() as f64;
    let _ = writeln!(
        s,
        r#"<line x1="{MARGIN}" y1="{axis_y}" x2="{:.1}" y2="{axis_y}" stroke="black"/>"#,
        MARGIN + plot_w
    );
    for tick in 0..=5 {
        let v = tick as f64 / 5.0;
        let x = MARGIN + v * plot_w;
        let _ = writeln!(
            s,
            r#"<text x="{x:.1}" y="{:.1}" font-family="sans-serif" font-size="10" text-anchor="middle">{v:.1}</text>"#,
            axis_y + 15.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="12" text-anchor="middle">Propensity score</text>"#,
        MARGIN + plot_w / 2.0,
        axis_y + 32.0
    );

    for u in 0..result.n_units() {
        let jitter: f64 = rng.random_range(-0.35..0.35);
        let matched = !result.is_discarded(u) && result.unit_weight[u] > 0.0;
        let treated = frame.is_treated(u);
        let band = match (treated, matched) {
            (true, false) => 0,
            (true, true) => 1,
            (false, true) => 2,
            (false, false) => 3,
        };
        let score = model.scores.get(u).copied().unwrap_or(f64::NAN);
        let x = MARGIN + score.clamp(0.0, 1.0) * plot_w;
        let y = 20.0 + BAND * (band as f64 + 0.5 + jitter);
        let r = if weighted && max_w > 0.0 {
            1.5 + 6.0 * result.unit_weight[u] / max_w
        } else {
            3.0
        };
        let (class, fill) = if matched { ("matched", MATCHED) } else { ("unmatched", UNMATCHED) };
        let _ = writeln!(
            s,
            r#"<circle class="unit {class}" data-unit="{u}" cx="{x:.2}" cy="{y:.2}" r="{r:.2}" fill="{fill}" fill-opacity="0.7"/>"#
        );
    }
    s.push_str("</svg>\n");
    s
}

pub fn plot_jitter(
    model: &PropensityModel,
    frame: &StudyFrame,
    result: &MatchResult,
    path: &Path,
    seed: u64,
) -> io::Result<()> {
    std::fs::write(path, render_jitter(model, frame, result, seed))
}

/// Love plot: one row per covariate with the absolute standardized difference
/// before (open circle) and after (filled circle) the design, and a dashed
/// reference line at the threshold.
pub fn render_love(report: &BalanceReport) -> String {
    let rows = report.records.len().max(1);
    let row_h = 24.0;
    let height = 40.0 + row_h * rows as f64 + 50.0;
    let plot_w = WIDTH - MARGIN - 20.0;
    let threshold = report.thresholds.std_diff_max;
    let finite_max = report
        .records
        .iter()
        .flat_map(|r| [r.std_diff_pre.abs(), r.std_diff_post.abs()])
        .filter(|v| v.is_finite())
        .fold(0.0, f64::max);
    let x_max = (finite_max.max(2.0 * threshold) * 1.1).max(1e-9);
    let xpos = |v: f64| MARGIN + v.min(x_max) / x_max * plot_w;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" viewBox="0 0 {WIDTH} {height}">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let top = 30.0;
    let bottom = top + row_h * rows as f64;
    let rx = xpos(threshold);
    let _ = writeln!(
        s,
        r##"<line class="reference" data-value="{threshold}" x1="{rx:.2}" y1="{:.1}" x2="{rx:.2}" y2="{bottom:.1}" stroke="#c03030" stroke-dasharray="4,3"/>"##,
        top - 10.0
    );
    let _ = writeln!(
        s,
        r#"<line x1="{MARGIN}" y1="{bottom:.1}" x2="{:.1}" y2="{bottom:.1}" stroke="black"/>"#,
        MARGIN + plot_w
    );
    for tick in 0..=4 {
        let v = x_max * tick as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="10" text-anchor="middle">{v:.2}</text>"#,
            xpos(v),
            bottom + 15.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="12" text-anchor="middle">Absolute standardized difference</text>"#,
        MARGIN + plot_w / 2.0,
        bottom + 35.0
    );
    for (i, r) in report.records.iter().enumerate() {
        let y = top + row_h * (i as f64 + 0.5);
        let name = escape(&r.name);
        let _ = writeln!(
            s,
            r#"<text class="covariate" x="10" y="{:.1}" font-family="sans-serif" font-size="12">{name}</text>"#,
            y + 4.0
        );
        if r.std_diff_pre.is_finite() {
            let _ = writeln!(
                s,
                r#"<circle class="pre" data-covariate="{name}" cx="{:.2}" cy="{y:.1}" r="4" fill="none" stroke="black"/>"#,
                xpos(r.std_diff_pre.abs())
            );
        }
        if r.std_diff_post.is_finite() {
            let _ = writeln!(
                s,
                r#"<circle class="post" data-covariate="{name}" cx="{:.2}" cy="{y:.1}" r="4" fill="black"/>"#,
                xpos(r.std_diff_post.abs())
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

pub fn plot_love(report: &BalanceReport, path: &Path) -> io::Result<()> {
    std::fs::write(path, render_love(report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diagnostics::BalanceRecord;

    #[test]
    fn love_plot_rows_and_reference() {
        let mut rep = BalanceReport::empty();
        rep.records.push(BalanceRecord::new("age", 0.6, 0.05));
        rep.records.push(BalanceRecord::new("x<1>", -0.3, 0.1));
        let svg = render_love(&rep);
        assert_eq!(svg.matches(r#"class="pre""#).count(), 2);
        assert_eq!(svg.matches(r#"class="post""#).count(), 2);
        assert_eq!(svg.matches(r#"class="covariate""#).count(), 2);
        assert!(svg.contains(r#"class="reference" data-value="0.25""#));
        assert!(svg.contains("x&lt;1&gt;"));
        assert_eq!(svg, render_love(&rep));
    }
}
