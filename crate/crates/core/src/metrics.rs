//! Equal error rate and minimum normalized detection cost.
//!
//! Decision rule: accept a trial when `score >= threshold`, so tied scores
//! count as acceptances.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("degenerate labels: need at least one target and one non-target trial ({targets} targets, {nontargets} non-targets)")]
    DegenerateLabels { targets: usize, nontargets: usize },
    #[error("{scores} scores but {labels} labels")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("non-finite score at index {0}")]
    NonFinite(usize),
    #[error("invalid DCF config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub p_miss: f64,
    pub p_fa: f64,
}

/// Operating points in increasing threshold order, from accept-all
/// (`P_miss = 0, P_fa = 1`, threshold -inf) to reject-all (`P_miss = 1,
/// P_fa = 0`, threshold +inf). Consecutive thresholds that give the same
/// error rates are collapsed into the lowest one.
#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    pub points: Vec<OperatingPoint>,
    pub n_target: usize,
    pub n_nontarget: usize,
}

pub fn roc_points(scores: &[f64], labels: &[bool]) -> Result<RocCurve, MetricError> {
    if scores.len() != labels.len() {
        return Err(MetricError::LengthMismatch { scores: scores.len(), labels: labels.len() });
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(MetricError::NonFinite(i));
    }
    let n_target = labels.iter().filter(|&&l| l).count();
    let n_nontarget = labels.len() - n_target;
    if n_target == 0 || n_nontarget == 0 {
        return Err(MetricError::DegenerateLabels { targets: n_target, nontargets: n_nontarget });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    let (nt, nn) = (n_target as f64, n_nontarget as f64);
    let mut points = vec![OperatingPoint { threshold: f64::NEG_INFINITY, p_miss: 0.0, p_fa: 1.0 }];
    let (mut targets_below, mut nontargets_below) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let theta = scores[order[i]];
        let point = OperatingPoint {
            threshold: theta,
            p_miss: targets_below as f64 / nt,
            p_fa: (n_nontarget - nontargets_below) as f64 / nn,
        };
        let last = points.last().expect("non-empty");
        if point.p_miss != last.p_miss || point.p_fa != last.p_fa {
            points.push(point);
        }
        while i < order.len() && scores[order[i]] == theta {
            if labels[order[i]] {
                targets_below += 1;
            } else {
                nontargets_below += 1;
            }
            i += 1;
        }
    }
    points.push(OperatingPoint { threshold: f64::INFINITY, p_miss: 1.0, p_fa: 0.0 });
    Ok(RocCurve { points, n_target, n_nontarget })
}

/// EER in percent, by linear interpolation between the two operating points
/// that bracket the `P_miss = P_fa` crossing.
pub fn eer(curve: &RocCurve) -> f64 {
    let pts = &curve.points;
    let i = pts.iter().position(|p| p.p_miss >= p.p_fa).expect("reject-all point has p_miss >= p_fa");
    if i == 0 {
        return 100.0 * pts[0].p_miss;
    }
    let (a, b) = (pts[i - 1], pts[i]);
    let denom = (b.p_miss - a.p_miss) + (a.p_fa - b.p_fa);
    let t = (a.p_fa - a.p_miss) / denom;
    100.0 * (a.p_miss + t * (b.p_miss - a.p_miss))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DcfConfig {
    pub p_target: f64,
    pub c_miss: f64,
    pub c_fa: f64,
}

impl Default for DcfConfig {
    fn default() -> Self {
        Self { p_target: 0.05, c_miss: 1.0, c_fa: 1.0 }
    }
}

impl DcfConfig {
    pub fn validate(&self) -> Result<(), MetricError> {
        if !(self.p_target > 0.0 && self.p_target < 1.0) {
            return Err(MetricError::InvalidConfig(format!("p_target must be in (0, 1), got {}", self.p_target)));
        }
        if !(self.c_miss > 0.0 && self.c_fa > 0.0) {
            return Err(MetricError::InvalidConfig("costs must be positive".into()));
        }
        Ok(())
    }

    /// Cost of the better trivial system (accept-all or reject-all).
    pub fn default_cost(&self) -> f64 {
        (self.c_miss * self.p_target).min(self.c_fa * (1.0 - self.p_target))
    }

    pub fn cost(&self, p_miss: f64, p_fa: f64) -> f64 {
        self.c_miss * self.p_target * p_miss + self.c_fa * (1.0 - self.p_target) * p_fa
    }
}

/// Minimum normalized detection cost over the curve's operating points.
pub fn min_dcf(curve: &RocCurve, cfg: &DcfConfig) -> f64 {
    let best = curve.points.iter().map(|p| cfg.cost(p.p_miss, p.p_fa)).fold(f64::INFINITY, f64::min);
    best / cfg.default_cost()
}

/// `(EER %, minDCF)` for labeled scores.
pub fn evaluate(scores: &[f64], labels: &[bool], cfg: &DcfConfig) -> Result<(f64, f64), MetricError> {
    cfg.validate()?;
    let curve = roc_points(scores, labels)?;
    Ok((eer(&curve), min_dcf(&curve, cfg)))
}
