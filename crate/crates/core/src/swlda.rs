//! Stepwise linear discriminant analysis baseline.
//!
//! Classical formulation: ordinary least squares on the 0/1 labels with
//! forward entry by smallest partial-F p-value and backward removal of any
//! retained feature whose p-value drifts above the removal threshold.
//! Selection stops at a fixpoint, the feature cap, or the iteration guard.
//! Only channel-time features enter; the baseline has no interaction terms.

use nalgebra::{Cholesky, DMatrix, DVector};
use statrs::distribution::{ContinuousCDF, FisherSnedecor};
use thiserror::Error;

use crate::decode::SupportMask;

#[derive(Debug, Error)]
pub enum SwldaError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

#[derive(Debug, Clone, Copy)]
pub struct SwldaConfig {
    pub p_enter: f64,
    pub p_remove: f64,
    pub max_features: usize,
}

impl Default for SwldaConfig {
    fn default() -> Self {
        Self {
            p_enter: 0.05,
            p_remove: 0.10,
            max_features: 60,
        }
    }
}

/// Fitted stepwise model: selected feature indices and their OLS weights.
#[derive(Debug, Clone)]
pub struct SwldaModel {
    pub selected: Vec<usize>,
    pub weights: Vec<f64>,
    pub intercept: f64,
}

impl SwldaModel {
    pub fn empty() -> Self {
        Self {
            selected: Vec::new(),
            weights: Vec::new(),
            intercept: 0.0,
        }
    }

    pub fn discriminant(&self, row: nalgebra::DVectorView<f64>) -> f64 {
        let mut v = self.intercept;
        for (idx, w) in self.selected.iter().zip(&self.weights) {
            v += w * row[*idx];
        }
        v
    }
}

fn f_test_p(f_stat: f64, df_denom: usize) -> f64 {
    if df_denom == 0 || !f_stat.is_finite() {
        return 1.0;
    }
    if f_stat <= 0.0 {
        return 1.0;
    }
    match FisherSnedecor::new(1.0, df_denom as f64) {
        Ok(dist) => (1.0 - dist.cdf(f_stat)).clamp(0.0, 1.0),
        Err(_) => 1.0,
    }
}

struct LsFit {
    coef: DVector<f64>,
    rss: f64,
    gram_chol: Cholesky<f64, nalgebra::Dyn>,
}

// Least squares of centered y on the centered selected columns.
fn ls_fit(xc: &DMatrix<f64>, yc: &DVector<f64>, selected: &[usize]) -> Option<LsFit> {
    let m = selected.len();
    let mut gram = DMatrix::zeros(m, m);
    let mut xty = DVector::zeros(m);
    for (a, &ja) in selected.iter().enumerate() {
        let ca = xc.column(ja);
        xty[a] = ca.dot(yc);
        for (b, &jb) in selected.iter().enumerate().skip(a) {
            let v = ca.dot(&xc.column(jb));
            gram[(a, b)] = v;
            gram[(b, a)] = v;
        }
    }
    let chol = Cholesky::new(gram)?;
    let coef = chol.solve(&xty);
    let mut rss = yc.dot(yc);
    for a in 0..m {
        rss -= coef[a] * xty[a];
    }
    Some(LsFit {
        coef,
        rss: rss.max(0.0),
        gram_chol: chol,
    })
}

/// Forward-backward stepwise selection on an n x p feature matrix.
pub fn fit_swlda(
    x: &DMatrix<f64>,
    y: &[f64],
    config: &SwldaConfig,
) -> Result<SwldaModel, SwldaError> {
    let n = x.nrows();
    let p = x.ncols();
    if n != y.len() {
        return Err(SwldaError::InvalidInput(format!(
            "{n} rows but {} labels",
            y.len()
        )));
    }
    if n <= 10 {
        return Err(SwldaError::InvalidInput(format!(
            "need more than 10 observations, got {n}"
        )));
    }
    let pos = y.iter().filter(|&&v| v > 0.5).count();
    if pos == 0 || pos == n {
        return Err(SwldaError::InvalidInput(
            "labels must contain both classes".into(),
        ));
    }
    let y_mean = y.iter().sum::<f64>() / n as f64;
    let yc = DVector::from_fn(n, |i, _| y[i] - y_mean);
    let mut col_means = vec![0.0f64; p];
    let mut xc = x.clone();
    for j in 0..p {
        let mean = xc.column(j).sum() / n as f64;
        col_means[j] = mean;
        xc.column_mut(j).add_scalar_mut(-mean);
    }
    let col_norms: Vec<f64> = (0..p).map(|j| xc.column(j).norm_squared()).collect();

    let mut selected: Vec<usize> = Vec::new();
    let mut in_model = vec![false; p];
    let mut fit: Option<LsFit> = None;
    let guard = 10 * config.max_features;
    for _ in 0..guard {
        let mut changed = false;

        // forward step: candidate with the smallest partial-F p-value
        if selected.len() < config.max_features {
            let rss_now = fit.as_ref().map_or_else(|| yc.dot(&yc), |f| f.rss);
            let df = n.saturating_sub(selected.len() + 2);
            let mut best: Option<(f64, usize, f64)> = None; // (p-value, feature, rss_new)
            for j in 0..p {
                if in_model[j] || col_norms[j] <= 1e-12 {
                    continue;
                }
                // conditional sum of squares of the candidate given the set
                let cj = xc.column(j);
                let (num, denom) = match &fit {
                    None => (cj.dot(&yc), col_norms[j]),
                    Some(f) => {
                        let mut g = DVector::zeros(selected.len());
                        for (a, &ja) in selected.iter().enumerate() {
                            g[a] = cj.dot(&xc.column(ja));
                        }
                        let sol = f.gram_chol.solve(&g);
                        let mut resid_dot = cj.dot(&yc);
                        let mut self_dot = col_norms[j];
                        for a in 0..selected.len() {
                            let xty_a = xc.column(selected[a]).dot(&yc);
                            resid_dot -= sol[a] * xty_a;
                            self_dot -= sol[a] * g[a];
                        }
                        (resid_dot, self_dot)
                    }
                };
                // singular within the selected set: reject, keep going
                if denom <= 1e-10 * col_norms[j] {
                    continue;
                }
                let drop_rss = num * num / denom;
                let rss_new = (rss_now - drop_rss).max(0.0);
                let f_stat = if rss_new <= 1e-300 {
                    f64::INFINITY
                } else {
                    drop_rss / (rss_new / df as f64)
                };
                let pv = f_test_p(f_stat, df);
                if best.as_ref().is_none_or(|b| pv < b.0) {
                    best = Some((pv, j, rss_new));
                }
            }
            if let Some((pv, j, _)) = best {
                if pv < config.p_enter {
                    selected.push(j);
                    in_model[j] = true;
                    fit = ls_fit(&xc, &yc, &selected);
                    if fit.is_none() {
                        // numerically singular after all: back out
                        in_model[j] = false;
                        selected.pop();
                        fit = if selected.is_empty() {
                            None
                        } else {
                            ls_fit(&xc, &yc, &selected)
                        };
                    } else {
                        changed = true;
                    }
                }
            }
        }

        // backward step: drop features whose p-value exceeds the removal bar
        loop {
            let Some(f) = &fit else { break };
            if selected.len() <= 1 && f.rss <= 1e-300 {
                break; // perfect fit with a single feature stays
            }
            let m = selected.len();
            if m == 0 {
                break;
            }
            let df = n.saturating_sub(m + 1);
            if df == 0 {
                break;
            }
            let sigma2 = f.rss / df as f64;
            // t^2 via the inverse Gram diagonal
            let inv = f.gram_chol.inverse();
            let mut worst: Option<(f64, usize)> = None;
            for a in 0..m {
                let se2 = sigma2 * inv[(a, a)];
                let f_stat = if se2 <= 0.0 {
                    f64::INFINITY
                } else {
                    f.coef[a] * f.coef[a] / se2
                };
                let pv = f_test_p(f_stat, df);
                if worst.as_ref().is_none_or(|w| pv > w.0) {
                    worst = Some((pv, a));
                }
            }
            match worst {
                Some((pv, a)) if pv > config.p_remove => {
                    let j = selected.remove(a);
                    in_model[j] = false;
                    fit = if selected.is_empty() {
                        None
                    } else {
                        ls_fit(&xc, &yc, &selected)
                    };
                    changed = true;
                }
                _ => break,
            }
        }

        if !changed {
            break;
        }
    }

    let model = match &fit {
        None => SwldaModel::empty(),
        Some(f) => {
            let mut intercept = y_mean;
            for (a, &j) in selected.iter().enumerate() {
                intercept -= f.coef[a] * col_means[j];
            }
            SwldaModel {
                selected: selected.clone(),
                weights: f.coef.iter().copied().collect(),
                intercept,
            }
        }
    };
    Ok(model)
}

/// Logistic of the discriminant, mapping scores into [0, 1] so accumulation
/// semantics match the Bayesian models. An empty model scores 1/2.
pub fn swlda_scores(model: &SwldaModel, x: &DMatrix<f64>) -> Vec<f64> {
    (0..x.nrows())
        .map(|i| {
            if model.selected.is_empty() {
                0.5
            } else {
                let d = model.discriminant(x.row(i).transpose().as_view());
                1.0 / (1.0 + (-d).exp())
            }
        })
        .collect()
}

/// CSV serialization of a fitted model: one (feature_index, weight) row per
/// selected feature, intercept last.
pub fn write_model_csv<W: std::io::Write>(
    model: &SwldaModel,
    out: &mut W,
) -> std::io::Result<()> {
    writeln!(out, "feature_index,weight")?;
    for (idx, w) in model.selected.iter().zip(&model.weights) {
        writeln!(out, "{idx},{w}")?;
    }
    writeln!(out, "intercept,{}", model.intercept)?;
    Ok(())
}

/// Channel-time mask of the selected features (channel-major layout).
pub fn swlda_support(model: &SwldaModel, channels: usize, timepoints: usize) -> SupportMask {
    let mut mask = SupportMask::new(channels, timepoints);
    for &j in &model.selected {
        let k = j / timepoints;
        let t = j % timepoints;
        mask.set(k, t, true);
    }
    mask
}
