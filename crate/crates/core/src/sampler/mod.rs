//! Gibbs sampler for the time-varying classification model.
//!
//! The linear predictor of flash i is
//!
//! ```text
//! mu_i = (1/p) sum_{k,t} beta_k(t) X_ki(t) + (1/q) sum_{k1<k2} zeta(k1,k2) Z_i(k1,k2)
//! ```
//!
//! where beta_k(t) = E_k(t) I(|relaxed E_k(t)| > omega1) with E_k expanded in
//! the truncated kernel eigenbasis, and zeta = eta I(|relaxed eta| > omega2)
//! with i.i.d. normal eta. Both links admit a conditionally Gaussian
//! augmentation (truncated-normal latent for probit, Polya-Gamma weights for
//! logit), after which every coefficient update is conjugate. The relaxation
//! variance anneals from 1 to its floor across burn-in and the thresholds
//! follow an adaptive discrete prior over an inter-quantile grid.

mod draws;

pub use draws::{load_draws, save_draws, PosteriorDraws};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use thiserror::Error;

use crate::data::Design;
use crate::kernel::KlBasis;
use crate::stats;

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("invalid sampler configuration: {0}")]
    InvalidConfig(String),
    #[error("structural error: {0}")]
    Structural(String),
    #[error("numerical failure in sweep {sweep}")]
    NumericalFailure { sweep: usize },
    #[error("bad magic bytes, not a posterior-draws file")]
    BadMagic,
    #[error("unsupported draws-file version {0}")]
    UnsupportedVersion(u16),
    #[error("truncated draws-file payload")]
    Truncated,
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LinkFunction {
    Probit,
    Logit,
}

impl LinkFunction {
    pub fn name(&self) -> &'static str {
        match self {
            LinkFunction::Probit => "probit",
            LinkFunction::Logit => "logit",
        }
    }

    /// Inverse link: class probability at a linear-predictor value.
    pub fn inverse(&self, mu: f64) -> f64 {
        match self {
            LinkFunction::Probit => stats::normal_cdf(mu),
            LinkFunction::Logit => 1.0 / (1.0 + (-mu).exp()),
        }
    }

    /// log Bernoulli likelihood of one observation, stable in both tails.
    pub fn ln_likelihood(&self, y: f64, mu: f64) -> f64 {
        match self {
            LinkFunction::Probit => {
                if y > 0.5 {
                    stats::ln_normal_cdf(mu)
                } else {
                    stats::ln_normal_cdf(-mu)
                }
            }
            LinkFunction::Logit => {
                let sp = |x: f64| if x > 30.0 { x } else { x.exp().ln_1p() };
                if y > 0.5 {
                    -sp(-mu)
                } else {
                    -sp(mu)
                }
            }
        }
    }
}

impl std::str::FromStr for LinkFunction {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "probit" => Ok(LinkFunction::Probit),
            "logit" => Ok(LinkFunction::Logit),
            other => Err(format!("unknown link function '{other}'")),
        }
    }
}

/// Relaxation-variance schedule: hold at `start` for the warm phase, decay
/// geometrically to `end` at the end of burn-in, constant afterwards.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Xi2Schedule {
    pub warm_iters: usize,
    pub start: f64,
    pub end: f64,
}

impl Default for Xi2Schedule {
    fn default() -> Self {
        Self {
            warm_iters: 200,
            start: 1.0,
            end: 1e-4,
        }
    }
}

impl Xi2Schedule {
    pub fn value(&self, sweep: usize, burn_in: usize) -> f64 {
        if sweep <= self.warm_iters {
            self.start
        } else if sweep >= burn_in || burn_in <= self.warm_iters {
            self.end
        } else {
            let frac = (sweep - self.warm_iters) as f64 / (burn_in - self.warm_iters) as f64;
            self.start * (self.end / self.start).powf(frac)
        }
    }
}

/// Adaptive discrete threshold prior: `points` evenly spaced candidates
/// between the `lower_q` and `upper_q` empirical quantiles of the current
/// relaxed-field magnitudes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OmegaGrid {
    pub points: usize,
    pub lower_q: f64,
    pub upper_q: f64,
}

impl Default for OmegaGrid {
    fn default() -> Self {
        Self {
            points: 10,
            lower_q: 0.25,
            upper_q: 0.90,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RtgpConfig {
    pub link: LinkFunction,
    pub use_interactions: bool,
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    /// Prior coefficient scale on standardized predictors.
    pub sigma_e2: f64,
    pub a_eta: f64,
    pub b_eta: f64,
    pub xi2: Xi2Schedule,
    pub omega: OmegaGrid,
    /// When false the thresholds stay at zero after the warm phase too;
    /// diagnostic knob for conjugate-subcase validation.
    pub adapt_thresholds: bool,
    pub seed: u64,
    /// Report sweep progress on stderr every 100 sweeps.
    pub progress: bool,
}

impl Default for RtgpConfig {
    fn default() -> Self {
        Self {
            link: LinkFunction::Probit,
            use_interactions: true,
            iterations: 3000,
            burn_in: 1000,
            thin: 5,
            sigma_e2: 3.0,
            a_eta: 0.001,
            b_eta: 0.001,
            xi2: Xi2Schedule::default(),
            omega: OmegaGrid::default(),
            adapt_thresholds: true,
            seed: 0,
            progress: false,
        }
    }
}

impl RtgpConfig {
    pub fn validate(&self) -> Result<(), SamplerError> {
        if self.burn_in >= self.iterations {
            return Err(SamplerError::InvalidConfig(format!(
                "burn_in {} must be below iterations {}",
                self.burn_in, self.iterations
            )));
        }
        if self.xi2.warm_iters > self.burn_in {
            return Err(SamplerError::InvalidConfig(format!(
                "warm_iters {} must not exceed burn_in {}",
                self.xi2.warm_iters, self.burn_in
            )));
        }
        if self.omega.points < 2 {
            return Err(SamplerError::InvalidConfig(
                "threshold grid needs at least 2 points".into(),
            ));
        }
        if self.thin == 0 || (self.iterations - self.burn_in) % self.thin != 0 {
            return Err(SamplerError::InvalidConfig(format!(
                "thin {} must divide iterations - burn_in = {}",
                self.thin,
                self.iterations - self.burn_in
            )));
        }
        if !(self.omega.lower_q >= 0.0
            && self.omega.lower_q < self.omega.upper_q
            && self.omega.upper_q <= 1.0)
        {
            return Err(SamplerError::InvalidConfig(
                "threshold quantile band must satisfy 0 <= lower < upper <= 1".into(),
            ));
        }
        if !(self.sigma_e2 > 0.0 && self.a_eta > 0.0 && self.b_eta > 0.0) {
            return Err(SamplerError::InvalidConfig(
                "sigma_e2, a_eta, b_eta must be positive".into(),
            ));
        }
        if !(self.xi2.start > 0.0 && self.xi2.end > 0.0) {
            return Err(SamplerError::InvalidConfig(
                "relaxation variances must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Number of stored draws.
    pub fn n_draws(&self) -> usize {
        (self.iterations - self.burn_in) / self.thin
    }

    /// Canonical key = value echo, embedded in the draws file.
    pub fn canonical_echo(&self) -> String {
        format!(
            "link = {}\nuse_interactions = {}\niterations = {}\nburn_in = {}\nthin = {}\n\
             sigma_e2 = {}\na_eta = {}\nb_eta = {}\nwarm_iters = {}\nxi2_start = {}\n\
             xi2_end = {}\nomega_points = {}\nomega_lower_q = {}\nomega_upper_q = {}\n\
             adapt_thresholds = {}\nseed = {}\n",
            self.link.name(),
            self.use_interactions,
            self.iterations,
            self.burn_in,
            self.thin,
            self.sigma_e2,
            self.a_eta,
            self.b_eta,
            self.xi2.warm_iters,
            self.xi2.start,
            self.xi2.end,
            self.omega.points,
            self.omega.lower_q,
            self.omega.upper_q,
            self.adapt_thresholds,
            self.seed,
        )
    }
}

/// One Gibbs state. `mu` caches the linear predictor of every flash and
/// `resid` the working residual; both are delta-updated on every move.
#[derive(Debug, Clone)]
pub struct RtgpState {
    /// K x L basis coefficients.
    pub kl_coeffs: DMatrix<f64>,
    /// K x T field E(k, t), always the exact basis expansion of `kl_coeffs`.
    pub field: DMatrix<f64>,
    /// K x T relaxed copy of the field.
    pub relaxed_field: DMatrix<f64>,
    /// Channel-major indicator cache I(|relaxed| > omega1).
    pub field_active: Vec<bool>,
    pub eta: DVector<f64>,
    pub eta_relaxed: DVector<f64>,
    pub eta_active: Vec<bool>,
    pub sigma_eta2: f64,
    pub omega1: f64,
    pub omega2: f64,
    pub xi2: f64,
    /// Working response per flash (truncated-normal latent for probit,
    /// kappa/omega pseudo-observation for logit).
    pub latent: Vec<f64>,
    /// Working precision per flash (1 for probit, the Polya-Gamma draw for
    /// logit).
    pub latent_precision: Vec<f64>,
    pub mu: Vec<f64>,
    pub resid: Vec<f64>,
}

impl RtgpState {
    fn new(channels: usize, timepoints: usize, rank: usize, q: usize, n: usize, xi2: f64) -> Self {
        Self {
            kl_coeffs: DMatrix::zeros(channels, rank),
            field: DMatrix::zeros(channels, timepoints),
            relaxed_field: DMatrix::zeros(channels, timepoints),
            field_active: vec![false; channels * timepoints],
            eta: DVector::zeros(q),
            eta_relaxed: DVector::zeros(q),
            eta_active: vec![false; q],
            sigma_eta2: 1.0,
            omega1: 0.0,
            omega2: 0.0,
            xi2,
            latent: vec![0.0; n],
            latent_precision: vec![1.0; n],
            mu: vec![0.0; n],
            resid: vec![0.0; n],
        }
    }

    /// Current thresholded coefficient beta(k, t).
    pub fn beta(&self, k: usize, t: usize) -> f64 {
        if self.field_active[k * self.field.ncols() + t] {
            self.field[(k, t)]
        } else {
            0.0
        }
    }

    /// Current thresholded interaction effect zeta(pair).
    pub fn zeta(&self, pair: usize) -> f64 {
        if self.eta_active[pair] {
            self.eta[pair]
        } else {
            0.0
        }
    }
}

/// Direct evaluation of the linear predictor from a state, for one flash.
pub fn linear_predictor(state: &RtgpState, x_flash: &[f64], z_flash: &[f64]) -> f64 {
    let (k_ch, t_len) = state.field.shape();
    let p = k_ch * t_len;
    debug_assert_eq!(x_flash.len(), p);
    let mut main = 0.0;
    for k in 0..k_ch {
        for t in 0..t_len {
            if state.field_active[k * t_len + t] {
                main += state.field[(k, t)] * x_flash[k * t_len + t];
            }
        }
    }
    let mut total = main / p as f64;
    let q = state.eta.len();
    if q > 0 {
        debug_assert_eq!(z_flash.len(), q);
        let mut inter = 0.0;
        for j in 0..q {
            if state.eta_active[j] {
                inter += state.eta[j] * z_flash[j];
            }
        }
        total += inter / q as f64;
    }
    total
}

/// Which threshold a discrete update targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThresholdTarget {
    Field,
    Interactions,
}

/// The sampler. One chain is strictly sequential; run several chains with
/// independent configs/seeds for parallelism.
pub struct GibbsChain<'a> {
    design: &'a Design,
    basis: &'a KlBasis,
    config: &'a RtgpConfig,
    state: RtgpState,
    rng: ChaCha8Rng,
    sweep: usize,
    inv_p: f64,
    inv_q: f64,
    /// psi^T psi, near-identity; kept exact so cache algebra stays tight.
    psi_gram: DMatrix<f64>,
    /// Per channel-time column: sum_i v_i x_i^2 (raw feature scale).
    sxx: Vec<f64>,
    /// Per interaction column: sum_i v_i z_i^2.
    szz: Vec<f64>,
}

impl<'a> GibbsChain<'a> {
    pub fn new(
        design: &'a Design,
        basis: &'a KlBasis,
        config: &'a RtgpConfig,
    ) -> Result<Self, SamplerError> {
        config.validate()?;
        if basis.psi.nrows() != design.timepoints {
            return Err(SamplerError::Structural(format!(
                "basis built on {} timepoints, design has {}",
                basis.psi.nrows(),
                design.timepoints
            )));
        }
        if design.x.ncols() != design.p() {
            return Err(SamplerError::Structural(
                "design feature matrix is not K*T wide".into(),
            ));
        }
        let q = design.q();
        let n = design.n();
        let xi2 = config.xi2.value(0, config.burn_in);
        let state = RtgpState::new(design.channels, design.timepoints, basis.rank, q, n, xi2);
        let psi_gram = basis.psi.transpose() * &basis.psi;
        let mut chain = Self {
            design,
            basis,
            config,
            state,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            sweep: 0,
            inv_p: 1.0 / design.p() as f64,
            inv_q: if q > 0 { 1.0 / q as f64 } else { 0.0 },
            psi_gram,
            sxx: vec![0.0; design.p()],
            szz: vec![0.0; q],
        };
        chain.refresh_weighted_norms();
        Ok(chain)
    }

    pub fn state(&self) -> &RtgpState {
        &self.state
    }

    /// Mutable state access for diagnostics and validation rigs.
    pub fn state_mut(&mut self) -> &mut RtgpState {
        &mut self.state
    }

    pub fn sweep_index(&self) -> usize {
        self.sweep
    }

    fn refresh_weighted_norms(&mut self) {
        let n = self.design.n();
        for col in 0..self.design.p() {
            let x = self.design.x.column(col);
            let mut s = 0.0;
            for i in 0..n {
                s += self.state.latent_precision[i] * x[i] * x[i];
            }
            self.sxx[col] = s;
        }
        for col in 0..self.design.q() {
            let z = self.design.z.column(col);
            let mut s = 0.0;
            for i in 0..n {
                s += self.state.latent_precision[i] * z[i] * z[i];
            }
            self.szz[col] = s;
        }
    }

    /// Recompute every linear predictor from scratch (cache oracle).
    pub fn recompute_mu(&self) -> Vec<f64> {
        let n = self.design.n();
        let t_len = self.design.timepoints;
        let mut mu = vec![0.0; n];
        for k in 0..self.design.channels {
            for t in 0..t_len {
                let idx = k * t_len + t;
                if self.state.field_active[idx] {
                    let a = self.state.field[(k, t)] * self.inv_p;
                    let col = self.design.x.column(idx);
                    for i in 0..n {
                        mu[i] += a * col[i];
                    }
                }
            }
        }
        for j in 0..self.design.q() {
            if self.state.eta_active[j] {
                let a = self.state.eta[j] * self.inv_q;
                let col = self.design.z.column(j);
                for i in 0..n {
                    mu[i] += a * col[i];
                }
            }
        }
        mu
    }

    fn rebuild_mu_cache(&mut self) {
        let mu = self.recompute_mu();
        for i in 0..mu.len() {
            self.state.resid[i] = self.state.latent[i] - mu[i];
        }
        self.state.mu = mu;
    }

    /// Draw the data augmentation given the current predictors.
    pub fn update_latent(&mut self) {
        let n = self.design.n();
        match self.config.link {
            LinkFunction::Probit => {
                for i in 0..n {
                    let mu = self.state.mu[i];
                    let w = if self.design.y[i] > 0.5 {
                        stats::trunc_normal(&mut self.rng, mu, 1.0, 0.0, f64::INFINITY)
                    } else {
                        stats::trunc_normal(&mut self.rng, mu, 1.0, f64::NEG_INFINITY, 0.0)
                    };
                    self.state.latent[i] = w;
                    self.state.latent_precision[i] = 1.0;
                    self.state.resid[i] = w - mu;
                }
            }
            LinkFunction::Logit => {
                for i in 0..n {
                    let mu = self.state.mu[i];
                    let om = stats::polya_gamma(&mut self.rng, mu).max(1e-12);
                    let w = (self.design.y[i] - 0.5) / om;
                    self.state.latent[i] = w;
                    self.state.latent_precision[i] = om;
                    self.state.resid[i] = w - mu;
                }
                self.refresh_weighted_norms();
            }
        }
    }

    /// Conditional mean and variance of one basis coefficient given
    /// everything else. Combines the masked likelihood, the relaxed-field
    /// link across all timepoints, and the N(0, sigma_e2 lambda_l) prior.
    pub fn kl_coeff_conditional(&self, k: usize, l: usize) -> (f64, f64) {
        let t_len = self.design.timepoints;
        let n = self.design.n();
        let mut u = vec![0.0; n];
        for t in 0..t_len {
            if self.state.field_active[k * t_len + t] {
                let w = self.inv_p * self.basis.psi[(t, l)];
                let col = self.design.x.column(k * t_len + t);
                for i in 0..n {
                    u[i] += w * col[i];
                }
            }
        }
        let e_old = self.state.kl_coeffs[(k, l)];
        let mut d1 = 0.0;
        let mut d2 = 0.0;
        for i in 0..n {
            let v = self.state.latent_precision[i];
            d1 += v * u[i] * self.state.resid[i];
            d2 += v * u[i] * u[i];
        }
        let mut psi_e_tilde = 0.0;
        let mut s_l = 0.0;
        for t in 0..t_len {
            psi_e_tilde += self.basis.psi[(t, l)] * self.state.relaxed_field[(k, t)];
        }
        for l2 in 0..self.basis.rank {
            s_l += self.psi_gram[(l, l2)] * self.state.kl_coeffs[(k, l2)];
        }
        let g_ll = self.psi_gram[(l, l)];
        let prior_prec = 1.0 / (self.config.sigma_e2 * self.basis.lambdas[l]);
        let prec = d2 + g_ll / self.state.xi2 + prior_prec;
        let link_num = (psi_e_tilde - (s_l - e_old * g_ll)) / self.state.xi2;
        ((d1 + e_old * d2 + link_num) / prec, 1.0 / prec)
    }

    /// One conjugate pass over all basis coefficients.
    pub fn update_kl_coeffs(&mut self) -> Result<(), SamplerError> {
        let k_ch = self.design.channels;
        let t_len = self.design.timepoints;
        let l_rank = self.basis.rank;
        let n = self.design.n();
        let xi2 = self.state.xi2;
        let mut u = DMatrix::<f64>::zeros(n, l_rank);
        let mut s_vec = DVector::<f64>::zeros(l_rank);
        let mut psi_e_tilde = DVector::<f64>::zeros(l_rank);
        for k in 0..k_ch {
            u.fill(0.0);
            for t in 0..t_len {
                if self.state.field_active[k * t_len + t] {
                    let col = self.design.x.column(k * t_len + t);
                    for l in 0..l_rank {
                        let w = self.inv_p * self.basis.psi[(t, l)];
                        if w != 0.0 {
                            let mut ucol = u.column_mut(l);
                            for i in 0..n {
                                ucol[i] += w * col[i];
                            }
                        }
                    }
                }
            }
            for l in 0..l_rank {
                let mut acc = 0.0;
                for t in 0..t_len {
                    acc += self.basis.psi[(t, l)] * self.state.relaxed_field[(k, t)];
                }
                psi_e_tilde[l] = acc;
            }
            for l in 0..l_rank {
                let mut acc = 0.0;
                for l2 in 0..l_rank {
                    acc += self.psi_gram[(l, l2)] * self.state.kl_coeffs[(k, l2)];
                }
                s_vec[l] = acc;
            }
            for l in 0..l_rank {
                let e_old = self.state.kl_coeffs[(k, l)];
                let ucol = u.column(l);
                let mut d1 = 0.0;
                let mut d2 = 0.0;
                for i in 0..n {
                    let v = self.state.latent_precision[i];
                    d1 += v * ucol[i] * self.state.resid[i];
                    d2 += v * ucol[i] * ucol[i];
                }
                let g_ll = self.psi_gram[(l, l)];
                let prior_prec = 1.0 / (self.config.sigma_e2 * self.basis.lambdas[l]);
                let prec = d2 + g_ll / xi2 + prior_prec;
                if !(prec > 0.0) || !prec.is_finite() {
                    return Err(SamplerError::NumericalFailure { sweep: self.sweep });
                }
                let link_num = (psi_e_tilde[l] - (s_vec[l] - e_old * g_ll)) / xi2;
                let mean = (d1 + e_old * d2 + link_num) / prec;
                let e_new = mean + stats::standard_normal(&mut self.rng) / prec.sqrt();
                let delta = e_new - e_old;
                if delta != 0.0 {
                    self.state.kl_coeffs[(k, l)] = e_new;
                    for i in 0..n {
                        let du = delta * ucol[i];
                        self.state.mu[i] += du;
                        self.state.resid[i] -= du;
                    }
                    for t in 0..t_len {
                        self.state.field[(k, t)] += delta * self.basis.psi[(t, l)];
                    }
                    for l2 in 0..l_rank {
                        s_vec[l2] += delta * self.psi_gram[(l2, l)];
                    }
                }
            }
        }
        Ok(())
    }

    /// Log-weights (active region, inactive region) of the two-region full
    /// conditional of the relaxed field at (k, t).
    pub fn relaxed_region_log_weights(&self, k: usize, t: usize) -> (f64, f64) {
        let t_len = self.design.timepoints;
        let idx = k * t_len + t;
        let e_val = self.state.field[(k, t)];
        let a_scale = e_val * self.inv_p;
        let col = self.design.x.column(idx);
        let mut dot_xr = 0.0;
        for i in 0..self.design.n() {
            dot_xr += self.state.latent_precision[i] * col[i] * self.state.resid[i];
        }
        let mut lik_num = a_scale * dot_xr;
        if self.state.field_active[idx] {
            lik_num += a_scale * a_scale * self.sxx[idx];
        }
        let ll_diff = lik_num - 0.5 * a_scale * a_scale * self.sxx[idx];
        let (ln_out, ln_in) =
            stats::ln_two_region_masses(e_val, self.state.xi2.sqrt(), self.state.omega1);
        (ln_out + ll_diff, ln_in)
    }

    /// Redraw the relaxed field, region first, then a truncated normal
    /// within the region; the indicator cache and predictors follow flips.
    pub fn update_relaxed_field(&mut self) {
        let k_ch = self.design.channels;
        let t_len = self.design.timepoints;
        let n = self.design.n();
        let xi = self.state.xi2.sqrt();
        let omega = self.state.omega1;
        for k in 0..k_ch {
            for t in 0..t_len {
                let idx = k * t_len + t;
                let (w_active, w_inactive) = self.relaxed_region_log_weights(k, t);
                let p_active = region_probability(w_active, w_inactive);
                let e_val = self.state.field[(k, t)];
                let active = self.rng.gen::<f64>() < p_active;
                let draw = if active {
                    stats::trunc_normal_outside(&mut self.rng, e_val, xi, omega)
                } else {
                    stats::trunc_normal(&mut self.rng, e_val, xi, -omega, omega)
                };
                self.state.relaxed_field[(k, t)] = draw;
                if active != self.state.field_active[idx] {
                    self.state.field_active[idx] = active;
                    let sign = if active { 1.0 } else { -1.0 };
                    let a = sign * e_val * self.inv_p;
                    let col = self.design.x.column(idx);
                    for i in 0..n {
                        let d = a * col[i];
                        self.state.mu[i] += d;
                        self.state.resid[i] -= d;
                    }
                }
            }
        }
    }

    /// Conditional mean and variance of one interaction effect.
    pub fn eta_conditional(&self, pair: usize) -> (f64, f64) {
        let n = self.design.n();
        let col = self.design.z.column(pair);
        let eta_old = self.state.eta[pair];
        let mut d1 = 0.0;
        let mut d2 = 0.0;
        if self.state.eta_active[pair] {
            for i in 0..n {
                let g = self.inv_q * col[i];
                let v = self.state.latent_precision[i];
                d1 += v * g * self.state.resid[i];
                d2 += v * g * g;
            }
        }
        let prec = d2 + 1.0 / self.state.xi2 + 1.0 / self.state.sigma_eta2;
        let mean = (d1 + eta_old * d2 + self.state.eta_relaxed[pair] / self.state.xi2) / prec;
        (mean, 1.0 / prec)
    }

    /// Interaction block: eta, relaxed eta, and the variance hyperparameter.
    pub fn update_interactions(&mut self) -> Result<(), SamplerError> {
        if !self.config.use_interactions {
            return Ok(());
        }
        let q = self.design.q();
        if q == 0 {
            return Ok(());
        }
        let n = self.design.n();
        let xi2 = self.state.xi2;
        let xi = xi2.sqrt();
        let omega = self.state.omega2;
        for j in 0..q {
            let (mean, var) = self.eta_conditional(j);
            if !(var > 0.0) || !var.is_finite() {
                return Err(SamplerError::NumericalFailure { sweep: self.sweep });
            }
            let eta_old = self.state.eta[j];
            let eta_new = mean + stats::standard_normal(&mut self.rng) * var.sqrt();
            let col = self.design.z.column(j);
            if self.state.eta_active[j] && eta_new != eta_old {
                let a = (eta_new - eta_old) * self.inv_q;
                for i in 0..n {
                    let d = a * col[i];
                    self.state.mu[i] += d;
                    self.state.resid[i] -= d;
                }
            }
            self.state.eta[j] = eta_new;

            // relaxed copy: same two-region scheme with threshold omega2
            let a_scale = eta_new * self.inv_q;
            let mut dot_zr = 0.0;
            for i in 0..n {
                dot_zr += self.state.latent_precision[i] * col[i] * self.state.resid[i];
            }
            let mut lik_num = a_scale * dot_zr;
            if self.state.eta_active[j] {
                lik_num += a_scale * a_scale * self.szz[j];
            }
            let ll_diff = lik_num - 0.5 * a_scale * a_scale * self.szz[j];
            let (ln_out, ln_in) = stats::ln_two_region_masses(eta_new, xi, omega);
            let p_active = region_probability(ln_out + ll_diff, ln_in);
            let active = self.rng.gen::<f64>() < p_active;
            let draw = if active {
                stats::trunc_normal_outside(&mut self.rng, eta_new, xi, omega)
            } else {
                stats::trunc_normal(&mut self.rng, eta_new, xi, -omega, omega)
            };
            self.state.eta_relaxed[j] = draw;
            if active != self.state.eta_active[j] {
                self.state.eta_active[j] = active;
                let sign = if active { 1.0 } else { -1.0 };
                let a = sign * eta_new * self.inv_q;
                for i in 0..n {
                    let d = a * col[i];
                    self.state.mu[i] += d;
                    self.state.resid[i] -= d;
                }
            }
        }
        // sigma_eta^2 | eta ~ IG(a + q/2, b + sum(eta^2)/2)
        let ss: f64 = self.state.eta.iter().map(|e| e * e).sum();
        let (shape, rate) = sigma_eta2_conditional(self.config.a_eta, self.config.b_eta, q, ss);
        self.state.sigma_eta2 = draw_inverse_gamma(&mut self.rng, shape, rate);
        Ok(())
    }

    /// Marginal log-likelihood of the labels under each candidate threshold,
    /// with the linear predictors delta-recomputed from indicator flips.
    pub fn threshold_log_weights(&self, grid: &[f64], target: ThresholdTarget) -> Vec<f64> {
        let n = self.design.n();
        let t_len = self.design.timepoints;
        let mut weights = Vec::with_capacity(grid.len());
        for &cand in grid {
            let mut dmu = vec![0.0; n];
            match target {
                ThresholdTarget::Field => {
                    for k in 0..self.design.channels {
                        for t in 0..t_len {
                            let idx = k * t_len + t;
                            let want = self.state.relaxed_field[(k, t)].abs() > cand;
                            if want != self.state.field_active[idx] {
                                let sign = if want { 1.0 } else { -1.0 };
                                let a = sign * self.state.field[(k, t)] * self.inv_p;
                                let col = self.design.x.column(idx);
                                for i in 0..n {
                                    dmu[i] += a * col[i];
                                }
                            }
                        }
                    }
                }
                ThresholdTarget::Interactions => {
                    for j in 0..self.design.q() {
                        let want = self.state.eta_relaxed[j].abs() > cand;
                        if want != self.state.eta_active[j] {
                            let sign = if want { 1.0 } else { -1.0 };
                            let a = sign * self.state.eta[j] * self.inv_q;
                            let col = self.design.z.column(j);
                            for i in 0..n {
                                dmu[i] += a * col[i];
                            }
                        }
                    }
                }
            }
            let mut ll = 0.0;
            for i in 0..n {
                ll += self
                    .config
                    .link
                    .ln_likelihood(self.design.y[i], self.state.mu[i] + dmu[i]);
            }
            weights.push(ll);
        }
        weights
    }

    fn sample_candidate(&mut self, log_weights: &[f64]) -> usize {
        let m = log_weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = log_weights.iter().map(|&l| (l - m).exp()).collect();
        let total: f64 = w.iter().sum();
        let mut u = self.rng.gen::<f64>() * total;
        for (i, wi) in w.iter().enumerate() {
            u -= wi;
            if u <= 0.0 {
                return i;
            }
        }
        w.len() - 1
    }

    /// Adaptive discrete threshold updates; inactive during the warm phase.
    pub fn update_thresholds(&mut self) {
        if !self.config.adapt_thresholds || self.sweep <= self.config.xi2.warm_iters {
            return;
        }
        let grid1 = quantile_grid(
            self.state.relaxed_field.iter().map(|v| v.abs()),
            &self.config.omega,
        );
        if let Some(grid) = grid1 {
            let weights = self.threshold_log_weights(&grid, ThresholdTarget::Field);
            let choice = self.sample_candidate(&weights);
            self.state.omega1 = grid[choice];
            let t_len = self.design.timepoints;
            for k in 0..self.design.channels {
                for t in 0..t_len {
                    self.state.field_active[k * t_len + t] =
                        self.state.relaxed_field[(k, t)].abs() > self.state.omega1;
                }
            }
            self.rebuild_mu_cache();
        }
        if self.config.use_interactions && self.design.q() >= 2 {
            let grid2 = quantile_grid(
                self.state.eta_relaxed.iter().map(|v| v.abs()),
                &self.config.omega,
            );
            if let Some(grid) = grid2 {
                let weights = self.threshold_log_weights(&grid, ThresholdTarget::Interactions);
                let choice = self.sample_candidate(&weights);
                self.state.omega2 = grid[choice];
                for j in 0..self.design.q() {
                    self.state.eta_active[j] =
                        self.state.eta_relaxed[j].abs() > self.state.omega2;
                }
                self.rebuild_mu_cache();
            }
        }
    }

    /// Independence-Metropolis refresh of whole per-channel field blocks
    /// from their prior, accepted by the working-likelihood ratio (prior and
    /// proposal cancel). The single-site conditionals lock the field to its
    /// relaxed copy once the relaxation variance is small, so without this
    /// move the indicator pattern freezes at its burn-in state; blocks the
    /// data cares about reject the proposal, unsupported blocks keep mixing
    /// across the threshold. The interaction block is deliberately left out:
    /// its prior scale is learned, and refreshing from a learned scale feeds
    /// the scale update its own proposals, which diverges when the data does
    /// not pin the interactions down.
    pub fn refresh_blocks(&mut self) {
        let t_len = self.design.timepoints;
        let l_rank = self.basis.rank;
        let n = self.design.n();
        let xi = self.state.xi2.sqrt();
        let mut delta_mu = vec![0.0; n];
        for k in 0..self.design.channels {
            let e_prop = DVector::from_fn(l_rank, |l, _| {
                stats::standard_normal(&mut self.rng)
                    * (self.config.sigma_e2 * self.basis.lambdas[l]).sqrt()
            });
            let field_prop = &self.basis.psi * &e_prop;
            let mut relaxed_prop = DVector::zeros(t_len);
            let mut active_prop = vec![false; t_len];
            for t in 0..t_len {
                relaxed_prop[t] = field_prop[t] + xi * stats::standard_normal(&mut self.rng);
                active_prop[t] = relaxed_prop[t].abs() > self.state.omega1;
            }
            delta_mu.iter_mut().for_each(|v| *v = 0.0);
            let mut any = false;
            for t in 0..t_len {
                let idx = k * t_len + t;
                let old = if self.state.field_active[idx] {
                    self.state.field[(k, t)]
                } else {
                    0.0
                };
                let new = if active_prop[t] { field_prop[t] } else { 0.0 };
                if new != old {
                    any = true;
                    let a = (new - old) * self.inv_p;
                    let col = self.design.x.column(idx);
                    for i in 0..n {
                        delta_mu[i] += a * col[i];
                    }
                }
            }
            let mut ll_diff = 0.0;
            if any {
                for i in 0..n {
                    let v = self.state.latent_precision[i];
                    ll_diff += v * (self.state.resid[i] * delta_mu[i]
                        - 0.5 * delta_mu[i] * delta_mu[i]);
                }
            }
            if ll_diff >= 0.0 || self.rng.gen::<f64>() < ll_diff.exp() {
                for l in 0..l_rank {
                    self.state.kl_coeffs[(k, l)] = e_prop[l];
                }
                for t in 0..t_len {
                    self.state.field[(k, t)] = field_prop[t];
                    self.state.relaxed_field[(k, t)] = relaxed_prop[t];
                    self.state.field_active[k * t_len + t] = active_prop[t];
                }
                for i in 0..n {
                    self.state.mu[i] += delta_mu[i];
                    self.state.resid[i] -= delta_mu[i];
                }
            }
        }
    }

    /// One systematic scan with the annealed relaxation variance.
    pub fn step(&mut self) -> Result<(), SamplerError> {
        self.sweep += 1;
        self.state.xi2 = self.config.xi2.value(self.sweep, self.config.burn_in);
        self.update_latent();
        self.update_kl_coeffs()?;
        self.update_relaxed_field();
        self.update_interactions()?;
        for _ in 0..REFRESH_PASSES {
            self.refresh_blocks();
        }
        self.update_thresholds();
        Ok(())
    }
}

/// Prior-refresh proposals per sweep; rejected proposals are cheap and more
/// passes shorten the survival time of unsupported threshold lobes.
const REFRESH_PASSES: usize = 3;

fn region_probability(ln_active: f64, ln_inactive: f64) -> f64 {
    if ln_inactive == f64::NEG_INFINITY {
        return 1.0;
    }
    if ln_active == f64::NEG_INFINITY {
        return 0.0;
    }
    let p = 1.0 / (1.0 + (ln_inactive - ln_active).exp());
    if p.is_finite() {
        p
    } else {
        0.0
    }
}

/// IG shape and rate of the interaction-variance full conditional.
pub fn sigma_eta2_conditional(a_eta: f64, b_eta: f64, q: usize, eta_sum_sq: f64) -> (f64, f64) {
    (a_eta + q as f64 / 2.0, b_eta + 0.5 * eta_sum_sq)
}

fn draw_inverse_gamma<R: Rng>(rng: &mut R, shape: f64, rate: f64) -> f64 {
    let g = Gamma::new(shape, 1.0 / rate).expect("valid gamma parameters");
    let x: f64 = g.sample(rng).max(1e-300);
    1.0 / x
}

/// `points` evenly spaced values between the lower and upper empirical
/// quantiles of the magnitudes; `None` when the band is degenerate.
fn quantile_grid(values: impl Iterator<Item = f64>, omega: &OmegaGrid) -> Option<Vec<f64>> {
    let mut sorted: Vec<f64> = values.collect();
    if sorted.len() < 2 {
        return None;
    }
    sorted.sort_by(f64::total_cmp);
    let quantile = |p: f64| -> f64 {
        let h = (sorted.len() - 1) as f64 * p;
        let lo = h.floor() as usize;
        let hi = (lo + 1).min(sorted.len() - 1);
        sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
    };
    let qa = quantile(omega.lower_q);
    let qb = quantile(omega.upper_q);
    if !(qb - qa).is_finite() || qb - qa < 1e-300 {
        return None;
    }
    let z = omega.points;
    Some(
        (0..z)
            .map(|i| qa + (qb - qa) * i as f64 / (z - 1) as f64)
            .collect(),
    )
}

/// Run a full chain and collect thinned post-burn-in draws.
pub fn run_chain(
    design: &Design,
    basis: &KlBasis,
    config: &RtgpConfig,
) -> Result<PosteriorDraws, SamplerError> {
    let mut chain = GibbsChain::new(design, basis, config)?;
    let mut draws = PosteriorDraws::empty(
        design.channels,
        design.timepoints,
        design.q(),
        basis.clone(),
        config,
        design.standardizer.clone(),
    );
    for it in 1..=config.iterations {
        chain.step()?;
        if config.progress && it % 100 == 0 {
            eprintln!("sweep {it}/{}", config.iterations);
        }
        if it > config.burn_in && (it - config.burn_in) % config.thin == 0 {
            draws.push_state(chain.state());
        }
    }
    debug_assert_eq!(draws.n_draws, config.n_draws());
    Ok(draws)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Design, Standardizer};
    use crate::kernel::{build_kl_basis, time_grid, KernelParams};

    fn empty_design(channels: usize, timepoints: usize) -> Design {
        let q = channels * (channels - 1) / 2;
        Design {
            x: DMatrix::zeros(0, channels * timepoints),
            z: DMatrix::zeros(0, q),
            y: vec![],
            channels,
            timepoints,
            standardizer: Standardizer {
                means: vec![0.0; channels * timepoints],
                scales: vec![1.0; channels * timepoints],
                interaction_means: vec![0.0; q],
            },
        }
    }

    fn tiny_labeled_design(n: usize, channels: usize, timepoints: usize, seed: u64) -> Design {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = channels * timepoints;
        let q = channels * (channels - 1) / 2;
        let x = DMatrix::from_fn(n, p, |_, _| stats::standard_normal(&mut rng));
        let z = DMatrix::from_fn(n, q, |_, _| 0.3 * stats::standard_normal(&mut rng));
        let y = (0..n)
            .map(|i| {
                let s: f64 = x.row(i).iter().take(3).sum();
                if s + stats::standard_normal(&mut rng) > 0.0 {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        Design {
            x,
            z,
            y,
            channels,
            timepoints,
            standardizer: Standardizer {
                means: vec![0.0; p],
                scales: vec![1.0; p],
                interaction_means: vec![0.0; q],
            },
        }
    }

    fn basis_for(timepoints: usize) -> crate::kernel::KlBasis {
        let grid = time_grid(timepoints);
        build_kl_basis(&grid, &KernelParams::new(0.01, 5.0).unwrap(), 1.0).unwrap()
    }

    fn quick_config(seed: u64) -> RtgpConfig {
        RtgpConfig {
            iterations: 60,
            burn_in: 20,
            thin: 4,
            xi2: Xi2Schedule {
                warm_iters: 10,
                start: 1.0,
                end: 1e-3,
            },
            seed,
            ..RtgpConfig::default()
        }
    }

    #[test]
    fn config_validation_and_draw_count() {
        let mut c = RtgpConfig::default();
        assert!(c.validate().is_ok());
        assert_eq!(c.n_draws(), 400);
        c.iterations = 1000;
        c.burn_in = 500;
        c.thin = 5;
        assert_eq!(c.n_draws(), 100);
        c.burn_in = 1000;
        assert!(c.validate().is_err());
        c.burn_in = 500;
        c.xi2.warm_iters = 600;
        assert!(c.validate().is_err());
        c.xi2.warm_iters = 200;
        c.omega.points = 1;
        assert!(c.validate().is_err());
    }

    #[test]
    fn xi2_schedule_shape() {
        let s = Xi2Schedule::default();
        assert_eq!(s.value(1, 1000), 1.0);
        assert_eq!(s.value(200, 1000), 1.0);
        assert_eq!(s.value(1000, 1000), 1e-4);
        assert_eq!(s.value(2500, 1000), 1e-4);
        let mid = s.value(600, 1000);
        assert!(mid < 1.0 && mid > 1e-4);
        // geometric: halfway in sweeps is halfway in log space
        let expect = (0.5f64 * (1e-4f64).ln()).exp();
        assert!((s.value(600, 1000) / expect - 1.0).abs() < 1e-12, "{mid}");
    }

    #[test]
    fn latent_moments_probit() {
        let mut d = tiny_labeled_design(2, 1, 2, 5);
        d.x.fill(0.0);
        d.y = vec![1.0, 1.0];
        let basis = basis_for(2);
        let config = quick_config(9);
        let mut chain = GibbsChain::new(&d, &basis, &config).unwrap();
        // mu = 0: half-normal mean sqrt(2/pi)
        let n_rep = 100_000;
        let mut sum = 0.0;
        for _ in 0..n_rep {
            chain.update_latent();
            sum += chain.state().latent[0];
        }
        let mean = sum / n_rep as f64;
        assert!((mean - 0.7978845608028654).abs() < 0.01, "{mean}");
        // mu = 10: truncation negligible
        chain.state_mut().mu = vec![10.0, 10.0];
        let mut sum = 0.0;
        for _ in 0..n_rep {
            chain.update_latent();
            sum += chain.state().latent[0];
        }
        let mean = sum / n_rep as f64;
        assert!((mean - 10.0).abs() < 0.02, "{mean}");
    }

    #[test]
    fn latent_moments_logit() {
        let mut d = tiny_labeled_design(2, 1, 2, 6);
        d.x.fill(0.0);
        let basis = basis_for(2);
        let mut config = quick_config(10);
        config.link = LinkFunction::Logit;
        let mut chain = GibbsChain::new(&d, &basis, &config).unwrap();
        let n_rep = 100_000;
        let mut sum = 0.0;
        for _ in 0..n_rep {
            chain.update_latent();
            sum += chain.state().latent_precision[0];
        }
        let mean = sum / n_rep as f64;
        assert!((mean - 0.25).abs() < 0.01, "PG(1,0) mean {mean}");
    }

    #[test]
    fn kl_conditional_reduces_to_prior_without_information() {
        // no data, huge xi2: conditional is the prior N(0, sigma_e2 lambda_l)
        let d = empty_design(1, 4);
        let basis = basis_for(4);
        let mut config = quick_config(3);
        config.xi2 = Xi2Schedule {
            warm_iters: 20,
            start: 1e12,
            end: 1e12,
        };
        let chain = GibbsChain::new(&d, &basis, &config).unwrap();
        for l in 0..basis.rank {
            let (mean, var) = chain.kl_coeff_conditional(0, l);
            let prior_var = config.sigma_e2 * basis.lambdas[l];
            assert!(mean.abs() < 1e-9);
            assert!((var / prior_var - 1.0).abs() < 1e-3, "l={l}");
        }
    }

    #[test]
    fn kl_conditional_matches_normal_normal_algebra() {
        // delta == 0 everywhere: only the relaxed-field link and the prior
        // inform e_{kl}; compare with directly evaluated Gaussian algebra.
        let d = tiny_labeled_design(30, 1, 5, 2);
        let basis = basis_for(5);
        let mut config = quick_config(4);
        config.xi2 = Xi2Schedule {
            warm_iters: 20,
            start: 0.37,
            end: 0.37,
        };
        let mut chain = GibbsChain::new(&d, &basis, &config).unwrap();
        {
            let st = chain.state_mut();
            st.field_active.iter_mut().for_each(|a| *a = false);
            for t in 0..5 {
                st.relaxed_field[(0, t)] = 0.1 * (t as f64 + 1.0);
            }
            st.kl_coeffs[(0, 1)] = 0.4;
            for t in 0..5 {
                st.field[(0, t)] = 0.4 * basis.psi[(t, 1)];
            }
            st.xi2 = 0.37;
        }
        let (mean, var) = chain.kl_coeff_conditional(0, 1);
        // independent algebra: precision = |psi_l|^2/xi2 + 1/(sigma_e2 lambda)
        let psi_l = basis.psi.column(1);
        let g_ll: f64 = psi_l.iter().map(|v| v * v).sum();
        let xi2 = 0.37;
        let prior_prec = 1.0 / (config.sigma_e2 * basis.lambdas[1]);
        let prec = g_ll / xi2 + prior_prec;
        // numerator: psi_l' (E_tilde - E_{-l}) / xi2 with E_{-l} = E - e_old psi_l
        let mut num = 0.0;
        for t in 0..5 {
            let e_minus = chain.state().field[(0, t)] - 0.4 * basis.psi[(t, 1)];
            num += basis.psi[(t, 1)] * (chain.state().relaxed_field[(0, t)] - e_minus) / xi2;
        }
        assert!((mean - num / prec).abs() < 1e-8, "{mean} vs {}", num / prec);
        assert!((var - 1.0 / prec).abs() < 1e-8);
    }

    #[test]
    fn relaxed_region_probability_matches_gaussian_tails() {
        // no data, field at zero: P(active) = 2 Phi(-omega/xi)
        let d = empty_design(1, 3);
        let basis = basis_for(3);
        let mut config = quick_config(8);
        config.adapt_thresholds = false;
        let mut chain = GibbsChain::new(&d, &basis, &config).unwrap();
        chain.state_mut().omega1 = 0.8;
        chain.state_mut().xi2 = 0.49; // xi = 0.7
        let (w1, w0) = chain.relaxed_region_log_weights(0, 0);
        let p1 = 1.0 / (1.0 + (w0 - w1).exp());
        let analytic = 2.0 * stats::normal_cdf(-0.8 / 0.7);
        assert!((p1 - analytic).abs() < 1e-10, "{p1} vs {analytic}");
        // empirical agreement
        let n_rep = 20_000;
        let mut active = 0;
        for _ in 0..n_rep {
            chain.update_relaxed_field();
            if chain.state().field_active[0] {
                active += 1;
            }
        }
        let rate = active as f64 / n_rep as f64;
        assert!((rate - analytic).abs() < 0.01, "{rate} vs {analytic}");
    }

    #[test]
    fn zero_threshold_draws_plain_normal() {
        let d = empty_design(1, 3);
        let basis = basis_for(3);
        let config = quick_config(12);
        let mut chain = GibbsChain::new(&d, &basis, &config).unwrap();
        chain.state_mut().omega1 = 0.0;
        chain.state_mut().xi2 = 0.25;
        chain.state_mut().field[(0, 0)] = 1.3;
        let n_rep = 50_000;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..n_rep {
            chain.update_relaxed_field();
            assert!(chain.state().field_active[0]);
            let v = chain.state().relaxed_field[(0, 0)];
            sum += v;
            sum_sq += v * v;
        }
        let mean = sum / n_rep as f64;
        let var = sum_sq / n_rep as f64 - mean * mean;
        assert!((mean - 1.3).abs() < 0.01, "{mean}");
        assert!((var - 0.25).abs() < 0.01, "{var}");
    }

    #[test]
    fn high_threshold_with_tiny_relaxation_shuts_beta_off() {
        let d = empty_design(1, 3);
        let basis = basis_for(3);
        let config = quick_config(13);
        let mut chain = GibbsChain::new(&d, &basis, &config).unwrap();
        chain.state_mut().omega1 = 5.0;
        chain.state_mut().xi2 = 1e-6;
        chain.state_mut().field[(0, 0)] = 1.0;
        let mut any_active = false;
        for _ in 0..5_000 {
            chain.update_relaxed_field();
            any_active |= chain.state().field_active[0];
        }
        assert!(!any_active);
        assert_eq!(chain.state().beta(0, 0), 0.0);
    }

    #[test]
    fn sigma_eta_conditional_parameters() {
        // q = 3, eta = (1, 2, 2), a = b = 0.001 -> IG(1.501, 4.501)
        let (shape, rate) = sigma_eta2_conditional(0.001, 0.001, 3, 1.0 + 4.0 + 4.0);
        assert!((shape - 1.501).abs() < 1e-12);
        assert!((rate - 4.501).abs() < 1e-12);
    }

    #[test]
    fn eta_prior_recovery_without_data() {
        let d = empty_design(3, 4); // q = 3
        let basis = basis_for(4);
        let mut config = quick_config(21);
        config.xi2 = Xi2Schedule {
            warm_iters: 10,
            start: 1e10,
            end: 1e10,
        };
        let mut chain = GibbsChain::new(&d, &basis, &config).unwrap();
        chain.state_mut().sigma_eta2 = 2.5;
        let (mean, var) = chain.eta_conditional(0);
        assert!(mean.abs() < 1e-9);
        assert!((var / 2.5 - 1.0).abs() < 1e-3, "var {var}");
    }

    #[test]
    fn interactions_flag_off_leaves_block_untouched() {
        let d = tiny_labeled_design(40, 2, 3, 31);
        let basis = basis_for(3);
        let mut config = quick_config(32);
        config.use_interactions = false;
        let draws = run_chain(&d, &basis, &config).unwrap();
        let (_, zeta_incl) = draws.posterior_inclusion();
        assert!(zeta_incl.iter().all(|&v| v == 0.0));
        for j in 0..d.q() {
            for dr in 0..draws.n_draws {
                assert_eq!(draws.zeta(dr, j), 0.0);
            }
        }
    }

    #[test]
    fn threshold_weights_uniform_when_no_indicator_changes() {
        let d = tiny_labeled_design(25, 1, 4, 41);
        let basis = basis_for(4);
        let config = quick_config(42);
        let mut chain = GibbsChain::new(&d, &basis, &config).unwrap();
        for _ in 0..5 {
            chain.step().unwrap();
        }
        // candidates below every |relaxed| magnitude flip nothing
        let min_abs = chain
            .state()
            .relaxed_field
            .iter()
            .map(|v| v.abs())
            .fold(f64::INFINITY, f64::min);
        let grid = vec![min_abs * 0.1, min_abs * 0.5, min_abs * 0.9];
        let w = chain.threshold_log_weights(&grid, ThresholdTarget::Field);
        assert!((w[0] - w[1]).abs() < 1e-9 && (w[1] - w[2]).abs() < 1e-9);
    }

    #[test]
    fn threshold_weight_collapses_for_separating_coefficient() {
        // 4 observations on one coefficient that separates the labels;
        // the candidate that zeroes it should carry (nearly) no weight.
        let mut d = tiny_labeled_design(4, 1, 1, 51);
        d.x = DMatrix::from_column_slice(4, 1, &[2.0, 1.5, -1.8, -2.2]);
        d.z = DMatrix::zeros(4, 0);
        d.y = vec![1.0, 1.0, 0.0, 0.0];
        let grid = time_grid(1);
        let basis = build_kl_basis(&grid, &KernelParams::new(0.01, 5.0).unwrap(), 1.0).unwrap();
        let config = quick_config(52);
        let mut chain = GibbsChain::new(&d, &basis, &config).unwrap();
        {
            let st = chain.state_mut();
            st.field[(0, 0)] = 4.0; // strong separator (scaled by 1/p = 1)
            st.relaxed_field[(0, 0)] = 4.0;
            st.field_active[0] = true;
            st.mu = d.x.column(0).iter().map(|x| 4.0 * x).collect();
        }
        let w = chain.threshold_log_weights(&[0.5, 10.0], ThresholdTarget::Field);
        // Direct likelihood-ratio evaluation: keeping the separator drives
        // its log-likelihood to ~0 while zeroing it leaves four coin flips,
        // so the gap is 4 ln 2 and the zeroing candidate's weight is 1/17.
        let gap = w[0] - w[1];
        assert!((gap - 4.0 * 2.0f64.ln()).abs() < 1e-6, "weights {w:?}");
        let weight_bad = 1.0 / (1.0 + gap.exp());
        assert!(weight_bad < 0.06, "bad-candidate weight {weight_bad}");
    }

    #[test]
    fn warm_phase_keeps_thresholds_at_zero() {
        let d = tiny_labeled_design(30, 1, 4, 61);
        let basis = basis_for(4);
        let mut config = quick_config(62);
        config.iterations = 16;
        config.burn_in = 12;
        config.thin = 1;
        config.xi2.warm_iters = 12;
        let mut chain = GibbsChain::new(&d, &basis, &config).unwrap();
        for _ in 0..12 {
            chain.step().unwrap();
            assert_eq!(chain.state().omega1, 0.0);
            assert_eq!(chain.state().omega2, 0.0);
        }
    }

    #[test]
    fn mu_cache_matches_direct_recomputation() {
        let d = tiny_labeled_design(60, 2, 6, 71);
        let basis = basis_for(6);
        let mut config = quick_config(72);
        config.iterations = 40;
        config.burn_in = 20;
        config.thin = 2;
        config.xi2.warm_iters = 8;
        let mut chain = GibbsChain::new(&d, &basis, &config).unwrap();
        for it in 0..40 {
            chain.step().unwrap();
            let fresh = chain.recompute_mu();
            for (i, f) in fresh.iter().enumerate() {
                assert!(
                    (chain.state().mu[i] - f).abs() < 1e-8,
                    "sweep {it}: cached {} vs fresh {}",
                    chain.state().mu[i],
                    f
                );
            }
            // field cache coherent with coefficients
            let recon = &chain.state().kl_coeffs * basis.psi.transpose();
            assert!((recon - &chain.state().field).norm() < 1e-10);
        }
    }

    #[test]
    fn linear_predictor_examples() {
        // all coefficients zero -> 0
        let mut state = RtgpState::new(1, 2, 1, 0, 0, 1.0);
        assert_eq!(linear_predictor(&state, &[3.0, -1.0], &[]), 0.0);
        // single active coefficient: beta(0,0)=2, x=3, p=2 -> 3
        state.field[(0, 0)] = 2.0;
        state.field_active[0] = true;
        assert_eq!(linear_predictor(&state, &[3.0, 0.0], &[]), 3.0);
        // threshold above support: nothing active -> 0
        state.field_active[0] = false;
        assert_eq!(linear_predictor(&state, &[3.0, 0.0], &[]), 0.0);
    }

    #[test]
    fn chain_is_deterministic_and_counts_draws() {
        let d = tiny_labeled_design(50, 2, 4, 81);
        let basis = basis_for(4);
        let mut config = quick_config(82);
        config.iterations = 100;
        config.burn_in = 50;
        config.thin = 5;
        let a = run_chain(&d, &basis, &config).unwrap();
        let b = run_chain(&d, &basis, &config).unwrap();
        assert_eq!(a.n_draws, 10);
        assert_eq!(a.beta_raw(), b.beta_raw());
        assert_eq!(a.zeta_raw(), b.zeta_raw());
        assert_eq!(a.indicator_raw(), b.indicator_raw());
        let mut config2 = config.clone();
        config2.seed = 83;
        let c = run_chain(&d, &basis, &config2).unwrap();
        assert_ne!(a.beta_raw(), c.beta_raw());
    }

    #[test]
    fn draws_are_exactly_sparse() {
        let d = tiny_labeled_design(80, 2, 5, 91);
        let basis = basis_for(5);
        let mut config = quick_config(92);
        config.iterations = 120;
        config.burn_in = 40;
        config.thin = 4;
        config.xi2.warm_iters = 10;
        let draws = run_chain(&d, &basis, &config).unwrap();
        for dr in 0..draws.n_draws {
            for k in 0..2 {
                for t in 0..5 {
                    if !draws.beta_active(dr, k, t) {
                        assert_eq!(draws.beta(dr, k, t), 0.0);
                    }
                }
            }
            for j in 0..d.q() {
                if !draws.zeta_active(dr, j) {
                    assert_eq!(draws.zeta(dr, j), 0.0);
                }
            }
        }
    }

    #[test]
    fn posterior_inclusion_trivial_cases() {
        let d = tiny_labeled_design(30, 1, 3, 95);
        let basis = basis_for(3);
        let mut config = quick_config(96);
        config.iterations = 30;
        config.burn_in = 10;
        config.thin = 2;
        // freeze thresholds at zero: indicators are 1 almost surely
        config.adapt_thresholds = false;
        let draws = run_chain(&d, &basis, &config).unwrap();
        let (incl, _) = draws.posterior_inclusion();
        assert!(incl.iter().all(|&v| v >= 0.0 && v <= 1.0));
        assert!(incl.iter().all(|&v| v == 1.0));
    }
}
