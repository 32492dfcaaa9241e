//! Linear score fusion with weights fitted by L2-regularized logistic
//! regression (damped Newton, zero initialization).

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

pub const DEFAULT_LAMBDA: f64 = 1e-4;
pub const MAX_ITERATIONS: usize = 200;
pub const GRAD_TOL: f64 = 1e-8;

#[derive(Debug, Error, PartialEq)]
pub enum FusionError {
    #[error("need both target and non-target trials to fit")]
    SingleClass,
    #[error("non-finite score at trial {trial}, system {system}")]
    NonFinite { trial: usize, system: usize },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("lambda must be finite and non-negative, got {0}")]
    BadLambda(f64),
    #[error("bad model text: {0}")]
    BadModel(String),
}

/// Trials × systems score matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    data: Vec<f64>,
    n_trials: usize,
    n_systems: usize,
}

impl ScoreMatrix {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, FusionError> {
        let n_systems = rows.first().map_or(0, Vec::len);
        if n_systems == 0 {
            return Err(FusionError::Dimension("need at least one system".into()));
        }
        if let Some(i) = rows.iter().position(|r| r.len() != n_systems) {
            return Err(FusionError::Dimension(format!("row {i} has {} systems, expected {n_systems}", rows[i].len())));
        }
        Self::checked(rows.concat(), rows.len(), n_systems)
    }

    /// One slice per system, each with one score per trial.
    pub fn from_columns(cols: &[&[f64]]) -> Result<Self, FusionError> {
        let n_trials = cols.first().map_or(0, |c| c.len());
        if cols.is_empty() {
            return Err(FusionError::Dimension("need at least one system".into()));
        }
        if let Some(j) = cols.iter().position(|c| c.len() != n_trials) {
            return Err(FusionError::Dimension(format!("system {j} has {} scores, expected {n_trials}", cols[j].len())));
        }
        let data = (0..n_trials).flat_map(|i| cols.iter().map(move |c| c[i])).collect();
        Self::checked(data, n_trials, cols.len())
    }

    fn checked(data: Vec<f64>, n_trials: usize, n_systems: usize) -> Result<Self, FusionError> {
        if let Some(k) = data.iter().position(|v| !v.is_finite()) {
            return Err(FusionError::NonFinite { trial: k / n_systems, system: k % n_systems });
        }
        Ok(Self { data, n_trials, n_systems })
    }

    pub fn n_trials(&self) -> usize {
        self.n_trials
    }

    pub fn n_systems(&self) -> usize {
        self.n_systems
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n_systems..(i + 1) * self.n_systems]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.n_trials).map(|i| self.data[i * self.n_systems + j]).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub lambda: f64,
    pub converged: bool,
    pub iterations: usize,
}

impl FusionModel {
    /// Fixed weights, e.g. the equal-weight average baseline.
    pub fn fixed(weights: Vec<f64>, bias: f64) -> Self {
        Self { weights, bias, lambda: 0.0, converged: true, iterations: 0 }
    }

    pub fn average(n_systems: usize) -> Self {
        Self::fixed(vec![1.0 / n_systems as f64; n_systems], 0.0)
    }

    /// `bias w1 ... wn` on one line, shortest round-trip float formatting.
    pub fn to_text(&self) -> String {
        let mut parts = vec![self.bias.to_string()];
        parts.extend(self.weights.iter().map(f64::to_string));
        parts.join(" ") + "\n"
    }

    pub fn from_text(text: &str) -> Result<Self, FusionError> {
        let vals = text
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|_| FusionError::BadModel(format!("not a number: {t:?}"))))
            .collect::<Result<Vec<_>, _>>()?;
        if vals.len() < 2 {
            return Err(FusionError::BadModel("need a bias and at least one weight".into()));
        }
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(FusionError::BadModel("non-finite parameter".into()));
        }
        Ok(Self::fixed(vals[1..].to_vec(), vals[0]))
    }
}

/// `ln(1 + e^t)` without overflow.
fn softplus(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// Mean logistic loss of linear scores `z` with labels (true = target).
pub fn log_loss(z: &[f64], labels: &[bool]) -> f64 {
    z.iter()
        .zip(labels)
        .map(|(&z, &l)| softplus(if l { -z } else { z }))
        .sum::<f64>()
        / z.len() as f64
}

struct Problem<'a> {
    m: &'a ScoreMatrix,
    y: Vec<f64>,
    lambda: f64,
}

impl Problem<'_> {
    fn margins(&self, theta: &DVector<f64>) -> Vec<f64> {
        (0..self.m.n_trials)
            .map(|i| theta[0] + self.m.row(i).iter().zip(theta.iter().skip(1)).map(|(s, w)| s * w).sum::<f64>())
            .collect()
    }

    fn objective(&self, theta: &DVector<f64>) -> f64 {
        let z = self.margins(theta);
        let n = self.m.n_trials as f64;
        let data: f64 = z.iter().zip(&self.y).map(|(z, y)| softplus(-y * z)).sum::<f64>() / n;
        data + 0.5 * self.lambda * theta.iter().skip(1).map(|w| w * w).sum::<f64>()
    }

    fn gradient_hessian(&self, theta: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let d = self.m.n_systems + 1;
        let n = self.m.n_trials as f64;
        let z = self.margins(theta);
        let mut g = DVector::zeros(d);
        let mut h = DMatrix::zeros(d, d);
        let mut x = vec![1.0; d];
        for (i, (&zi, &yi)) in z.iter().zip(&self.y).enumerate() {
            x[1..].copy_from_slice(self.m.row(i));
            let p = sigmoid(zi);
            let coef = -yi * sigmoid(-yi * zi);
            let curv = p * (1.0 - p);
            for a in 0..d {
                g[a] += coef * x[a];
                for b in 0..=a {
                    h[(a, b)] += curv * x[a] * x[b];
                }
            }
        }
        g /= n;
        h /= n;
        for a in 0..d {
            for b in 0..a {
                h[(b, a)] = h[(a, b)];
            }
        }
        for a in 1..d {
            g[a] += self.lambda * theta[a];
            h[(a, a)] += self.lambda;
        }
        (g, h)
    }
}

fn newton_direction(g: &DVector<f64>, h: &DMatrix<f64>) -> DVector<f64> {
    let scale = (h.trace() / h.nrows() as f64).max(1e-300);
    let mut ridge = 0.0;
    loop {
        let mut hr = h.clone();
        for a in 0..hr.nrows() {
            hr[(a, a)] += ridge;
        }
        if let Some(chol) = hr.cholesky() {
            let d = -chol.solve(g);
            if d.iter().all(|v| v.is_finite()) {
                return d;
            }
        }
        ridge = if ridge == 0.0 { 1e-12 * scale } else { ridge * 10.0 };
        if ridge > 1e6 * scale {
            return -g.clone();
        }
    }
}

/// Minimizes mean logistic loss plus `lambda * ‖w‖² / 2` (bias unregularized).
pub fn fit_fusion(m: &ScoreMatrix, labels: &[bool], lambda: f64) -> Result<FusionModel, FusionError> {
    if labels.len() != m.n_trials {
        return Err(FusionError::Dimension(format!("{} labels for {} trials", labels.len(), m.n_trials)));
    }
    if !labels.iter().any(|&l| l) || labels.iter().all(|&l| l) {
        return Err(FusionError::SingleClass);
    }
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(FusionError::BadLambda(lambda));
    }
    let prob = Problem { m, y: labels.iter().map(|&l| if l { 1.0 } else { -1.0 }).collect(), lambda };
    let mut theta = DVector::zeros(m.n_systems + 1);
    let mut f = prob.objective(&theta);
    let mut converged = false;
    let mut iterations = 0;
    while iterations < MAX_ITERATIONS {
        let (g, h) = prob.gradient_hessian(&theta);
        if g.amax() <= GRAD_TOL {
            converged = true;
            break;
        }
        iterations += 1;
        let d = newton_direction(&g, &h);
        let slope = g.dot(&d);
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let cand = &theta + &d * step;
            let fc = prob.objective(&cand);
            if fc <= f + 1e-4 * step * slope {
                accepted = Some((cand, fc));
                break;
            }
            step *= 0.5;
        }
        match accepted {
            Some((cand, fc)) => {
                theta = cand;
                f = fc;
            }
            // No representable decrease left along the Newton direction.
            None => break,
        }
    }
    if !converged {
        converged = prob.gradient_hessian(&theta).0.amax() <= GRAD_TOL;
    }
    Ok(FusionModel { bias: theta[0], weights: theta.iter().skip(1).copied().collect(), lambda, converged, iterations })
}

/// `w · s + b` per trial.
pub fn fuse(model: &FusionModel, m: &ScoreMatrix) -> Result<Vec<f64>, FusionError> {
    if model.weights.len() != m.n_systems {
        return Err(FusionError::Dimension(format!(
            "model has {} weights, score matrix has {} systems",
            model.weights.len(),
            m.n_systems
        )));
    }
    Ok((0..m.n_trials)
        .map(|i| model.bias + m.row(i).iter().zip(&model.weights).map(|(s, w)| s * w).sum::<f64>())
        .collect())
}
