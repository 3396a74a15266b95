use super::MatchError;
use crate::dataset::StudyFrame;
use crate::propensity::PropensityModel;
use crate::Estimand;

fn range(scores: &[f64], frame: &StudyFrame, treated: bool) -> (f64, f64) {
    (0..frame.n_units())
        .filter(|&u| frame.is_treated(u) == treated)
        .map(|u| scores[u])
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| (lo.min(s), hi.max(s)))
}

/// Flags units whose score falls outside the other arm's score range.
///
/// ATT discards only controls outside the treated range; ATE also discards
/// treated units outside the control range. Ranges are closed.
pub fn trim_common_support(
    model: &PropensityModel,
    frame: &StudyFrame,
    estimand: Estimand,
) -> Result<Vec<bool>, MatchError> {
    let s = &model.scores;
    let (t_lo, t_hi) = range(s, frame, true);
    let (c_lo, c_hi) = range(s, frame, false);
    let flags: Vec<bool> = (0..frame.n_units())
        .map(|u| {
            if frame.is_treated(u) {
                estimand == Estimand::Ate && (s[u] < c_lo || s[u] > c_hi)
            } else {
                s[u] < t_lo || s[u] > t_hi
            }
        })
        .collect();
    let kept_t = (0..frame.n_units()).any(|u| frame.is_treated(u) && !flags[u]);
    let kept_c = (0..frame.n_units()).any(|u| !frame.is_treated(u) && !flags[u]);
    if !kept_t || !kept_c {
        return Err(MatchError::EverythingDiscarded);
    }
    Ok(flags)
}
