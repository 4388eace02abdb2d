//! Ordinary least squares and the category-level calibration fits.
//!
//! Coefficients are solved with a Householder QR factorization of the
//! design matrix (intercept first). A column whose reflected diagonal
//! vanishes relative to its own norm lies in the span of the earlier
//! columns and is reported as a singular design.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bootstrap::{
    bootstrap_units, item_groups, BootstrapCI, BootstrapConfig, BootstrapError,
};
use crate::metrics::{category_summaries, CategorySummary, CellMetrics};
use crate::stats::{pearson_r, StatsError};

pub const INTERCEPT: &str = "intercept";
pub const CONF: &str = "conf";
pub const DIV: &str = "div";

/// Relative pivot size below which a column counts as collinear.
const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Error, PartialEq)]
pub enum RegressionError {
    #[error("need more than {params} observations, got {got}")]
    TooFewObservations { params: usize, got: usize },
    #[error("singular design: column(s) {} are collinear", .columns.join(", "))]
    SingularDesign { columns: Vec<String> },
    #[error("row {row} has {got} predictors, expected {expected}")]
    ArityMismatch {
        row: usize,
        got: usize,
        expected: usize,
    },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("{0}")]
    Input(String),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Bootstrap(#[from] BootstrapError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coefficient {
    pub name: String,
    pub estimate: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ci: Option<BootstrapCI>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionFit {
    pub coefficients: Vec<Coefficient>,
    /// `None` when the target has zero variance.
    pub r_squared: Option<f64>,
    pub mae: f64,
    pub residuals: Vec<f64>,
    pub n_obs: usize,
    pub degrees_of_freedom: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub degenerate: Option<String>,
}

impl RegressionFit {
    pub fn coefficient(&self, name: &str) -> Option<f64> {
        self.coefficients
            .iter()
            .find(|c| c.name == name)
            .map(|c| c.estimate)
    }

    /// Predictor names, intercept excluded.
    pub fn predictors(&self) -> Vec<&str> {
        self.coefficients
            .iter()
            .filter(|c| c.name != INTERCEPT)
            .map(|c| c.name.as_str())
            .collect()
    }

    /// Linear evaluation; `x` is in predictor order (intercept excluded).
    pub fn predict(&self, x: &[f64]) -> Result<f64, RegressionError> {
        let preds = self.predictors();
        if x.len() != preds.len() {
            return Err(RegressionError::ArityMismatch {
                row: 0,
                got: x.len(),
                expected: preds.len(),
            });
        }
        let mut it = x.iter();
        Ok(self
            .coefficients
            .iter()
            .map(|c| {
                if c.name == INTERCEPT {
                    c.estimate
                } else {
                    c.estimate * it.next().copied().unwrap_or(0.0)
                }
            })
            .sum())
    }

    /// Rendered equation, e.g. `y = 30.24 conf - 39.41 div - 54.63`.
    pub fn equation(&self, target: &str) -> String {
        let mut s = format!("{target} =");
        let mut first = true;
        let ordered = self
            .coefficients
            .iter()
            .filter(|c| c.name != INTERCEPT)
            .chain(self.coefficients.iter().filter(|c| c.name == INTERCEPT));
        for c in ordered {
            let sign = if c.estimate < 0.0 { "-" } else { "+" };
            let mag = c.estimate.abs();
            let term = if c.name == INTERCEPT {
                format!("{mag:.4}")
            } else {
                format!("{mag:.4} {}", c.name)
            };
            if first {
                let lead = if c.estimate < 0.0 { "-" } else { "" };
                let _ = write!(s, " {lead}{term}");
                first = false;
            } else {
                let _ = write!(s, " {sign} {term}");
            }
        }
        s
    }
}

/// Solves least squares for column-major `cols` by Householder QR. On
/// rank deficiency returns the index of the first dependent column.
fn householder_lstsq(mut cols: Vec<Vec<f64>>, mut y: Vec<f64>) -> Result<Vec<f64>, usize> {
    let n = y.len();
    let p = cols.len();
    let norms: Vec<f64> = cols
        .iter()
        .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let mut diag = vec![0.0; p];
    for j in 0..p {
        let alpha_norm = cols[j][j..].iter().map(|v| v * v).sum::<f64>().sqrt();
        if norms[j] == 0.0 || alpha_norm <= RANK_TOL * norms[j] {
            return Err(j);
        }
        let alpha = if cols[j][j] > 0.0 {
            -alpha_norm
        } else {
            alpha_norm
        };
        let mut v: Vec<f64> = cols[j][j..].to_vec();
        v[0] -= alpha;
        let vnorm2: f64 = v.iter().map(|x| x * x).sum();
        diag[j] = alpha;
        let reflect = |target: &mut [f64]| {
            let dot: f64 = v.iter().zip(target.iter()).map(|(a, b)| a * b).sum();
            let f = 2.0 * dot / vnorm2;
            for (t, vi) in target.iter_mut().zip(&v) {
                *t -= f * vi;
            }
        };
        for col in cols.iter_mut().skip(j + 1) {
            reflect(&mut col[j..]);
        }
        reflect(&mut y[j..n]);
    }
    let mut beta = vec![0.0; p];
    for j in (0..p).rev() {
        let mut acc = y[j];
        for (k, b) in beta.iter().enumerate().skip(j + 1) {
            acc -= cols[k][j] * b;
        }
        beta[j] = acc / diag[j];
    }
    Ok(beta)
}

/// OLS of `y` on `x` (rows of predictor values) with an intercept.
pub fn fit_ols(
    names: &[&str],
    x: &[Vec<f64>],
    y: &[f64],
) -> Result<RegressionFit, RegressionError> {
    let n = y.len();
    if x.len() != n {
        return Err(RegressionError::Input(format!(
            "{} predictor rows for {n} targets",
            x.len()
        )));
    }
    let p = names.len() + 1;
    if n <= p {
        return Err(RegressionError::TooFewObservations { params: p, got: n });
    }
    for (row, r) in x.iter().enumerate() {
        if r.len() != names.len() {
            return Err(RegressionError::ArityMismatch {
                row,
                got: r.len(),
                expected: names.len(),
            });
        }
        if r.iter().any(|v| !v.is_finite()) {
            return Err(RegressionError::NonFinite("predictors"));
        }
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(RegressionError::NonFinite("target"));
    }
    let mut all_names = vec![INTERCEPT];
    all_names.extend_from_slice(names);
    let mut cols = vec![vec![1.0; n]];
    for j in 0..names.len() {
        cols.push(x.iter().map(|r| r[j]).collect());
    }

    let beta = match householder_lstsq(cols.clone(), y.to_vec()) {
        Ok(b) => b,
        Err(j) => {
            return Err(RegressionError::SingularDesign {
                columns: collinear_set(&cols, j, &all_names),
            })
        }
    };

    let residuals: Vec<f64> = (0..n)
        .map(|i| y[i] - cols.iter().zip(&beta).map(|(c, b)| c[i] * b).sum::<f64>())
        .collect();
    let mae = residuals.iter().map(|r| r.abs()).sum::<f64>() / n as f64;
    let ybar = y.iter().sum::<f64>() / n as f64;
    let ss_tot: f64 = y.iter().map(|v| (v - ybar).powi(2)).sum();
    let ss_res: f64 = residuals.iter().map(|r| r * r).sum();
    let scale = y.iter().map(|v| v * v).sum::<f64>().max(1.0);
    let (r_squared, degenerate) = if ss_tot <= 1e-24 * scale {
        (
            None,
            Some("target has zero variance; R² is undefined".to_string()),
        )
    } else {
        (Some(1.0 - ss_res / ss_tot), None)
    };
    Ok(RegressionFit {
        coefficients: all_names
            .iter()
            .zip(beta)
            .map(|(name, estimate)| Coefficient {
                name: name.to_string(),
                estimate,
                ci: None,
            })
            .collect(),
        r_squared,
        mae,
        residuals,
        n_obs: n,
        degrees_of_freedom: n - p,
        degenerate,
    })
}

/// Names of column `j` and the earlier columns it depends on.
fn collinear_set(cols: &[Vec<f64>], j: usize, names: &[&str]) -> Vec<String> {
    let mut out = Vec::new();
    if j > 0 {
        if let Ok(beta) = householder_lstsq(cols[..j].to_vec(), cols[j].clone()) {
            let scale = cols[j]
                .iter()
                .map(|v| v.abs())
                .fold(0.0, f64::max)
                .max(1e-300);
            for (k, b) in beta.iter().enumerate() {
                let contrib = cols[k].iter().map(|v| (v * b).abs()).fold(0.0, f64::max);
                if contrib > 1e-8 * scale {
                    out.push(names[k].to_string());
                }
            }
        }
    }
    out.push(names[j].to_string());
    out
}

/// Category-level regression target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AgreementTarget {
    /// Percentage of unanimous cells.
    #[default]
    FullAgreement,
    /// Mean agreement share, as a percentage.
    MeanAgreement,
}

impl AgreementTarget {
    pub fn value(self, s: &CategorySummary) -> f64 {
        match self {
            AgreementTarget::FullAgreement => s.full_agreement_pct,
            AgreementTarget::MeanAgreement => 100.0 * s.mean_agreement,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AgreementTarget::FullAgreement => "full-agreement",
            AgreementTarget::MeanAgreement => "mean-agreement",
        }
    }
}

impl std::str::FromStr for AgreementTarget {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full-agreement" => Ok(AgreementTarget::FullAgreement),
            "mean-agreement" => Ok(AgreementTarget::MeanAgreement),
            other => Err(format!(
                "unknown target `{other}` (expected full-agreement or mean-agreement)"
            )),
        }
    }
}

/// Confidence-only fit: target on raw mean confidence.
pub fn fit_confidence_only(
    summaries: &[CategorySummary],
    target: AgreementTarget,
) -> Result<RegressionFit, RegressionError> {
    if summaries.len() < 3 {
        return Err(RegressionError::TooFewObservations {
            params: 2,
            got: summaries.len(),
        });
    }
    let x: Vec<Vec<f64>> = summaries.iter().map(|s| vec![s.mean_conf_raw]).collect();
    let y: Vec<f64> = summaries.iter().map(|s| target.value(s)).collect();
    fit_ols(&[CONF], &x, &y)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualSignalFit {
    pub dual: RegressionFit,
    pub confidence_only: RegressionFit,
    /// Dual R² minus confidence-only R².
    pub delta_r_squared: Option<f64>,
    /// Confidence-only MAE minus dual MAE.
    pub delta_mae: f64,
}

fn dual_fit_only(
    summaries: &[CategorySummary],
    target: AgreementTarget,
) -> Result<RegressionFit, RegressionError> {
    if summaries.len() < 4 {
        return Err(RegressionError::TooFewObservations {
            params: 3,
            got: summaries.len(),
        });
    }
    let x: Vec<Vec<f64>> = summaries
        .iter()
        .map(|s| vec![s.mean_conf_raw, s.mean_diversity])
        .collect();
    let y: Vec<f64> = summaries.iter().map(|s| target.value(s)).collect();
    fit_ols(&[CONF, DIV], &x, &y)
}

/// Two-predictor fit on raw mean confidence and mean diversity, reported
/// against the confidence-only fit on the same observations.
pub fn fit_dual_signal(
    summaries: &[CategorySummary],
    target: AgreementTarget,
) -> Result<DualSignalFit, RegressionError> {
    let confidence_only = fit_confidence_only(summaries, target)?;
    let dual = match dual_fit_only(summaries, target) {
        Ok(f) => f,
        // Diversity carries no information beyond the other columns: the
        // nested fit is the dual fit with a zero diversity coefficient.
        Err(RegressionError::SingularDesign { columns })
            if columns.last().map(String::as_str) == Some(DIV) =>
        {
            let mut f = confidence_only.clone();
            f.coefficients.push(Coefficient {
                name: DIV.to_string(),
                estimate: 0.0,
                ci: None,
            });
            f.degenerate = Some(format!(
                "{} collinear; fitted without {DIV}",
                columns.join(", ")
            ));
            f
        }
        Err(e) => return Err(e),
    };
    let delta_r_squared = match (dual.r_squared, confidence_only.r_squared) {
        (Some(a), Some(b)) => Some(a - b),
        _ => None,
    };
    Ok(DualSignalFit {
        delta_mae: confidence_only.mae - dual.mae,
        delta_r_squared,
        dual,
        confidence_only,
    })
}

/// Pearson correlation between confidence-only residuals and mean diversity.
pub fn residual_diversity_r(
    confidence_only: &RegressionFit,
    summaries: &[CategorySummary],
) -> Result<f64, RegressionError> {
    let d: Vec<f64> = summaries.iter().map(|s| s.mean_diversity).collect();
    Ok(pearson_r(&confidence_only.residuals, &d)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub value: f64,
    /// The prediction lies outside `[0, 100]`. Values are never clamped.
    pub out_of_range: bool,
}

/// Predicted agreement percentage from raw mean confidence and, for a
/// dual-signal fit, mean diversity.
pub fn predict_agreement(
    fit: &RegressionFit,
    conf_raw: f64,
    diversity: Option<f64>,
) -> Result<Prediction, RegressionError> {
    let x: Vec<f64> = std::iter::once(conf_raw).chain(diversity).collect();
    let value = fit.predict(&x)?;
    Ok(Prediction {
        value,
        out_of_range: !(0.0..=100.0).contains(&value),
    })
}

fn reference_fit(coefs: &[(&str, f64)], r_squared: f64, mae: f64) -> RegressionFit {
    RegressionFit {
        coefficients: coefs
            .iter()
            .map(|&(name, estimate)| Coefficient {
                name: name.to_string(),
                estimate,
                ci: None,
            })
            .collect(),
        r_squared: Some(r_squared),
        mae,
        residuals: Vec::new(),
        n_obs: 10,
        degrees_of_freedom: 10 - coefs.len(),
        degenerate: None,
    }
}

/// Published ten-category dual-signal plane:
/// `Agreement% = 30.24 c - 39.41 d - 54.63`.
pub fn published_dual_signal_fit() -> RegressionFit {
    reference_fit(
        &[(INTERCEPT, -54.63), (CONF, 30.24), (DIV, -39.41)],
        0.979,
        1.48,
    )
}

/// Published confidence-only line: `Agreement% = 30.24 c - 54.6`.
pub fn published_confidence_only_fit() -> RegressionFit {
    reference_fit(&[(INTERCEPT, -54.6), (CONF, 30.24)], 0.875, 3.06)
}

/// Percentile bootstrap CIs for the dual-signal coefficients, resampling
/// items and rebuilding the category summaries from the drawn cells.
/// Attaches the intervals to `fit` in coefficient order.
pub fn bootstrap_dual_coefficients(
    fit: &mut RegressionFit,
    metrics: &[CellMetrics],
    target: AgreementTarget,
    cfg: &BootstrapConfig,
) -> Result<(), RegressionError> {
    let groups = item_groups(metrics, |m| m.item_id.as_str());
    let cis = bootstrap_units(&groups, cfg, |draw| {
        let summaries = category_summaries(draw.iter().flat_map(|g| g.iter().copied()));
        dual_fit_only(&summaries, target)
            .map(|f| f.coefficients.iter().map(|c| c.estimate).collect())
            .map_err(|e| e.to_string())
    })?;
    if cis.len() != fit.coefficients.len() {
        return Err(RegressionError::Input(
            "bootstrap arity differs from the fit".into(),
        ));
    }
    for (c, ci) in fit.coefficients.iter_mut().zip(cis) {
        c.ci = Some(BootstrapCI {
            point: c.estimate,
            ..ci
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_line_recovered() {
        let x: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64]).collect();
        let y: Vec<f64> = (0..10).map(|i| 2.0 * i as f64 + 3.0).collect();
        let fit = fit_ols(&[CONF], &x, &y).unwrap();
        assert!((fit.coefficient(CONF).unwrap() - 2.0).abs() < 1e-12);
        assert!((fit.coefficient(INTERCEPT).unwrap() - 3.0).abs() < 1e-12);
        assert!((fit.r_squared.unwrap() - 1.0).abs() < 1e-12);
        assert!(fit.mae < 1e-12);
        assert_eq!(fit.degrees_of_freedom, 8);
    }

    #[test]
    fn matches_normal_equations_on_noisy_data() {
        // Oracle: closed-form simple regression slope/intercept.
        let xs = [1.0, 2.0, 4.0, 5.0, 7.0, 8.0];
        let ys = [2.1, 2.9, 5.2, 5.8, 8.4, 8.9];
        let n = xs.len() as f64;
        let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
        let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
        let slope = sxy / sxx;
        let x: Vec<Vec<f64>> = xs.iter().map(|&v| vec![v]).collect();
        let fit = fit_ols(&["x"], &x, &ys).unwrap();
        assert!((fit.coefficient("x").unwrap() - slope).abs() < 1e-12);
        assert!((fit.coefficient(INTERCEPT).unwrap() - (my - slope * mx)).abs() < 1e-12);
        assert!(fit.residuals.iter().sum::<f64>().abs() < 1e-10);
    }

    #[test]
    fn identical_columns_are_singular() {
        let x: Vec<Vec<f64>> = (0..8).map(|i| vec![i as f64, i as f64]).collect();
        let y: Vec<f64> = (0..8).map(|i| i as f64).collect();
        match fit_ols(&["a", "b"], &x, &y) {
            Err(RegressionError::SingularDesign { columns }) => {
                assert_eq!(columns, vec!["a".to_string(), "b".to_string()]);
            }
            other => panic!("{other:?}"),
        }
        let constant: Vec<Vec<f64>> = (0..8).map(|_| vec![4.0]).collect();
        match fit_ols(&[CONF], &constant, &y) {
            Err(RegressionError::SingularDesign { columns }) => {
                assert_eq!(columns, vec![INTERCEPT.to_string(), CONF.to_string()]);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn constant_target_is_degenerate() {
        let x: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64]).collect();
        let fit = fit_ols(&[CONF], &x, &[50.0; 6]).unwrap();
        assert!(fit.r_squared.is_none());
        assert!(fit.degenerate.is_some());
    }

    #[test]
    fn too_few_observations() {
        let x = vec![vec![1.0], vec![2.0]];
        assert!(matches!(
            fit_ols(&[CONF], &x, &[1.0, 2.0]),
            Err(RegressionError::TooFewObservations { .. })
        ));
    }

    #[test]
    fn published_equations_evaluate() {
        let dual = published_dual_signal_fit();
        let p = predict_agreement(&dual, 4.8, Some(0.1)).unwrap();
        assert!((p.value - 86.58).abs() < 0.01, "{}", p.value);
        let p = predict_agreement(&dual, 5.0, Some(0.0)).unwrap();
        assert!((p.value - 96.57).abs() < 0.01);
        let conf = published_confidence_only_fit();
        let p = predict_agreement(&conf, 4.58, None).unwrap();
        assert!((p.value - 83.90).abs() < 0.01);
        assert!(predict_agreement(&conf, 4.58, Some(0.1)).is_err());
        assert!(predict_agreement(&dual, 4.58, None).is_err());
        let low = predict_agreement(&dual, 1.0, Some(1.0)).unwrap();
        assert!(low.out_of_range && low.value < 0.0);
    }

    #[test]
    fn equation_rendering() {
        let s = published_dual_signal_fit().equation("agreement_pct");
        assert_eq!(s, "agreement_pct = 30.2400 conf - 39.4100 div - 54.6300");
    }
}
