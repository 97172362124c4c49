//! Synthetic P300 speller sessions.
//!
//! Signals decompose into evoked templates plus two noise layers: a spatially
//! correlated component whose channel covariance differs between target and
//! non-target flashes (tau^2 Sigma_1 vs tau^2 Sigma_0, independent across
//! time), and white channel noise (sigma^2). Channels beyond the signal set
//! carry no evoked difference, so support-recovery metrics have true
//! negatives to measure.

use nalgebra::{Cholesky, DMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::data::{FlashRecord, SessionData, SpellerLayout};
use crate::decode::SupportMask;
use crate::stats;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid generator configuration: {0}")]
    InvalidConfig(String),
    #[error("generation error: {0}")]
    Generation(String),
}

/// Evoked-response template family: one positive bump per signal channel,
/// compactly supported so null time regions exist on signal channels too.
#[derive(Debug, Clone, PartialEq)]
pub struct TemplateParams {
    /// Non-target peak amplitude in microvolts.
    pub amplitude: f64,
    /// Bump width on the unit time axis.
    pub width: f64,
    /// Bump centers, one per signal channel; channels beyond this list are
    /// null channels.
    pub centers: Vec<f64>,
    /// Support half-width in units of `width`; the bump is exactly zero
    /// further out.
    pub support_radius: f64,
}

impl Default for TemplateParams {
    fn default() -> Self {
        // The default amplitude is calibrated against the 6-channel noise
        // defaults (tau2 = 9, sigma2 = 20) so character accuracy sits in the
        // discriminating regime rather than saturating for every method.
        Self {
            amplitude: 1.3,
            width: 0.05,
            centers: vec![0.30, 0.40, 0.50, 0.60],
            support_radius: 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    /// Target-to-nontarget peak ratio on signal channels.
    pub peak_ratio: f64,
    /// Spatially correlated noise scale.
    pub tau2: f64,
    /// White noise variance.
    pub sigma2: f64,
    pub channels: usize,
    pub timepoints: usize,
    pub sequences: usize,
    /// Spelled text; its length sets the character count R.
    pub text: String,
    pub layout: SpellerLayout,
    /// Channel noise correlation under target flashes.
    pub sigma1: DMatrix<f64>,
    /// Channel noise correlation under non-target flashes.
    pub sigma0: DMatrix<f64>,
    pub template: TemplateParams,
    pub sample_rate: f64,
    pub display_ms: f64,
    pub pause_ms: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            peak_ratio: 2.5,
            tau2: 9.0,
            sigma2: 20.0,
            channels: 6,
            timepoints: 50,
            sequences: 5,
            text: "THE_QUICK_BROWN_FOX".to_string(),
            layout: SpellerLayout::default_6x6(),
            sigma1: paper_sigma1(),
            sigma0: paper_sigma0(),
            template: TemplateParams::default(),
            sample_rate: 512.0,
            display_ms: 125.0,
            pause_ms: 62.5,
            seed: 0,
        }
    }
}

/// Target-condition channel correlation of the simulation design.
pub fn paper_sigma1() -> DMatrix<f64> {
    DMatrix::from_row_slice(
        6,
        6,
        &[
            1.0, 0.7, 0.1, 0.1, 0.1, 0.2, //
            0.7, 1.0, 0.1, 0.1, 0.6, 0.1, //
            0.1, 0.1, 1.0, 0.7, 0.1, 0.1, //
            0.1, 0.1, 0.7, 1.0, 0.1, 0.1, //
            0.1, 0.6, 0.1, 0.1, 1.0, 0.4, //
            0.2, 0.1, 0.1, 0.1, 0.4, 1.0,
        ],
    )
}

/// Non-target-condition channel correlation of the simulation design.
pub fn paper_sigma0() -> DMatrix<f64> {
    DMatrix::from_row_slice(
        6,
        6,
        &[
            1.0, 0.1, 0.1, 0.5, 0.1, 0.8, //
            0.1, 1.0, 0.1, 0.1, 0.3, 0.1, //
            0.1, 0.1, 1.0, 0.1, 0.1, 0.1, //
            0.5, 0.1, 0.1, 1.0, 0.1, 0.1, //
            0.1, 0.3, 0.1, 0.1, 1.0, 0.3, //
            0.8, 0.1, 0.1, 0.1, 0.3, 1.0,
        ],
    )
}

impl SimConfig {
    pub fn r_chars(&self) -> usize {
        self.text.chars().count()
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.text.is_empty() {
            return Err(SimError::InvalidConfig("text must be non-empty".into()));
        }
        for c in self.text.chars() {
            if self.layout.cell_of(c).is_none() {
                return Err(SimError::InvalidConfig(format!(
                    "text symbol '{c}' is not on the speller layout"
                )));
            }
        }
        if self.timepoints < 20 {
            return Err(SimError::InvalidConfig(format!(
                "need at least 20 timepoints, got {}",
                self.timepoints
            )));
        }
        if self.template.centers.len() > self.channels {
            return Err(SimError::InvalidConfig(format!(
                "{} template centers for {} channels",
                self.template.centers.len(),
                self.channels
            )));
        }
        for (m, name) in [(&self.sigma1, "target"), (&self.sigma0, "non-target")] {
            if m.nrows() != self.channels || m.ncols() != self.channels {
                return Err(SimError::InvalidConfig(format!(
                    "{name} correlation matrix is {}x{}, expected {}x{}",
                    m.nrows(),
                    m.ncols(),
                    self.channels,
                    self.channels
                )));
            }
            if (m - m.transpose()).amax() > 1e-12 {
                return Err(SimError::InvalidConfig(format!(
                    "{name} correlation matrix is not symmetric"
                )));
            }
            for i in 0..self.channels {
                if (m[(i, i)] - 1.0).abs() > 1e-12 {
                    return Err(SimError::InvalidConfig(format!(
                        "{name} correlation matrix diagonal must be 1"
                    )));
                }
            }
            if Cholesky::new(m.clone()).is_none() {
                return Err(SimError::InvalidConfig(format!(
                    "{name} correlation matrix is not positive definite"
                )));
            }
        }
        if !(self.peak_ratio.is_finite() && self.tau2 >= 0.0 && self.sigma2 >= 0.0) {
            return Err(SimError::InvalidConfig(
                "peak ratio must be finite, variances non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Channel-by-time evoked means under both conditions.
#[derive(Debug, Clone)]
pub struct EvokedTemplates {
    /// Target means, K x T.
    pub target: DMatrix<f64>,
    /// Non-target means, K x T.
    pub nontarget: DMatrix<f64>,
}

/// Gaussian bumps on signal channels, zero beyond `support_radius` widths
/// from the center and zero everywhere on null channels; the target template
/// is the non-target one scaled by the peak ratio.
pub fn make_templates(config: &SimConfig) -> EvokedTemplates {
    let (k_ch, t_len) = (config.channels, config.timepoints);
    let tp = &config.template;
    let mut nontarget = DMatrix::zeros(k_ch, t_len);
    for (k, &center) in tp.centers.iter().enumerate() {
        for t in 0..t_len {
            let u = (t + 1) as f64 / t_len as f64;
            let d = (u - center).abs();
            if d <= tp.support_radius * tp.width {
                nontarget[(k, t)] =
                    tp.amplitude * (-(d * d) / (2.0 * tp.width * tp.width)).exp();
            }
        }
    }
    let target = &nontarget * config.peak_ratio;
    EvokedTemplates { target, nontarget }
}

/// True signal support: timepoints where the evoked difference is nonzero.
pub fn truth_support(config: &SimConfig) -> SupportMask {
    let tpl = make_templates(config);
    SupportMask::from_fn(config.channels, config.timepoints, |k, t| {
        (tpl.target[(k, t)] - tpl.nontarget[(k, t)]).abs() > 0.0
    })
}

/// Generate one labeled session: per character, `sequences` uniformly random
/// stimulus orders; per flash, the condition template plus correlated
/// spatial noise (independent across time) plus white noise.
pub fn generate_session(config: &SimConfig) -> Result<SessionData, SimError> {
    config.validate()?;
    let templates = make_templates(config);
    let (k_ch, t_len) = (config.channels, config.timepoints);
    let chol1 = Cholesky::new(config.sigma1.clone())
        .ok_or_else(|| SimError::Generation("target correlation not positive definite".into()))?;
    let chol0 = Cholesky::new(config.sigma0.clone()).ok_or_else(|| {
        SimError::Generation("non-target correlation not positive definite".into())
    })?;
    let l1 = chol1.l() * config.tau2.sqrt();
    let l0 = chol0.l() * config.tau2.sqrt();
    let white = config.sigma2.sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let j_count = config.layout.n_stimuli();
    let mut flashes = Vec::with_capacity(config.r_chars() * config.sequences * j_count);
    let mut z_buf = vec![0.0f64; k_ch];
    for (r, symbol) in config.text.chars().enumerate() {
        let (row_j, col_j) = config
            .layout
            .target_stimuli(symbol)
            .expect("validated symbol");
        for s in 1..=config.sequences {
            // uniformly random flash order within the sequence
            let mut order: Vec<u16> = (1..=j_count as u16).collect();
            for i in (1..order.len()).rev() {
                let j = rng.gen_range(0..=i);
                order.swap(i, j);
            }
            for &stim in &order {
                let is_target = stim == row_j || stim == col_j;
                let (template, l_chol) = if is_target {
                    (&templates.target, &l1)
                } else {
                    (&templates.nontarget, &l0)
                };
                let mut signal = DMatrix::<f32>::zeros(k_ch, t_len);
                for t in 0..t_len {
                    for z in z_buf.iter_mut() {
                        *z = stats::standard_normal(&mut rng);
                    }
                    for ch in 0..k_ch {
                        let mut spatial = 0.0;
                        for c2 in 0..=ch {
                            spatial += l_chol[(ch, c2)] * z_buf[c2];
                        }
                        let value = template[(ch, t)]
                            + spatial
                            + white * stats::standard_normal(&mut rng);
                        signal[(ch, t)] = value as f32;
                    }
                }
                flashes.push(FlashRecord::new(
                    (r + 1) as u16,
                    s as u16,
                    stim,
                    Some(is_target),
                    signal,
                ));
            }
        }
    }
    let channel_names = (1..=k_ch).map(|k| format!("SIM{k}")).collect();
    SessionData::new(
        k_ch,
        t_len,
        config.sample_rate,
        config.display_ms,
        config.pause_ms,
        config.layout.clone(),
        channel_names,
        flashes,
    )
    .map_err(|e| SimError::Generation(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::pair_index;

    #[test]
    fn template_shapes_and_ratio() {
        let mut config = SimConfig::default();
        config.peak_ratio = 2.5;
        config.template.amplitude = 2.0;
        let tpl = make_templates(&config);
        // channels 5-6 are null
        for k in 4..6 {
            for t in 0..config.timepoints {
                assert_eq!(tpl.target[(k, t)], 0.0);
                assert_eq!(tpl.nontarget[(k, t)], 0.0);
            }
        }
        // channel 2's center (0.40) sits on the T = 50 grid, so its peak
        // attains the amplitude exactly: max target 5.0, max non-target 2.0
        let max_t = tpl.target.row(1).max();
        let max_n = tpl.nontarget.row(1).max();
        assert!((max_n - 2.0).abs() < 1e-9, "{max_n}");
        assert!((max_t - 5.0).abs() < 1e-9, "{max_t}");
        // off-grid centers peak within one grid step of the amplitude and
        // keep the exact target/non-target ratio
        for k in 0..4 {
            let mt = tpl.target.row(k).max();
            let mn = tpl.nontarget.row(k).max();
            assert!((mn - 2.0).abs() < 0.02, "channel {k}: {mn}");
            assert!((mt / mn - 2.5).abs() < 1e-12, "channel {k}");
        }
        // alpha = 1 collapses the conditions
        config.peak_ratio = 1.0;
        let tpl = make_templates(&config);
        assert_eq!(tpl.target, tpl.nontarget);
    }

    #[test]
    fn truth_support_has_both_regions_on_signal_channels() {
        let config = SimConfig::default();
        let mask = truth_support(&config);
        for k in 0..4 {
            let active = (0..config.timepoints).filter(|&t| mask.get(k, t)).count();
            assert!(active > 0 && active < config.timepoints, "channel {k}");
        }
        for k in 4..6 {
            assert_eq!((0..config.timepoints).filter(|&t| mask.get(k, t)).count(), 0);
        }
    }

    #[test]
    fn paper_correlations_are_positive_definite() {
        for m in [paper_sigma1(), paper_sigma0()] {
            let eig = m.symmetric_eigen();
            let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
            assert!(min > 0.0, "min eigenvalue {min}");
        }
    }

    #[test]
    fn noiseless_limit_recovers_templates() {
        let config = SimConfig {
            tau2: 0.0,
            sigma2: 0.0,
            text: "TO".into(),
            sequences: 2,
            seed: 5,
            ..SimConfig::default()
        };
        let session = generate_session(&config).unwrap();
        let tpl = make_templates(&config);
        let mut target_zs: Vec<nalgebra::DVector<f64>> = Vec::new();
        for f in &session.flashes {
            let target = f.label == Some(true);
            let expect = if target { &tpl.target } else { &tpl.nontarget };
            for ch in 0..config.channels {
                for t in 0..config.timepoints {
                    assert!(
                        (f.signal[(ch, t)] as f64 - expect[(ch, t)]).abs() < 1e-6,
                        "noiseless signal should equal the template"
                    );
                }
            }
            if target {
                target_zs.push(f.interaction.clone());
            }
        }
        // interactions constant across target flashes in the noiseless limit
        for z in &target_zs[1..] {
            assert!((z - &target_zs[0]).amax() < 1e-9);
        }
    }

    #[test]
    fn label_structure_two_targets_per_sequence() {
        let config = SimConfig {
            text: "THE".into(),
            seed: 11,
            ..SimConfig::default()
        };
        let session = generate_session(&config).unwrap();
        assert_eq!(session.n_flashes(), 3 * config.sequences * 12);
        assert!(session.is_labeled());
        for r in 1..=3u16 {
            for s in 1..=config.sequences as u16 {
                let targets: Vec<u16> = session
                    .flashes
                    .iter()
                    .filter(|f| f.char_index == r && f.sequence == s && f.label == Some(true))
                    .map(|f| f.stimulus)
                    .collect();
                assert_eq!(targets.len(), 2);
            }
            // target cell matches the text
            let symbol = config.text.chars().nth((r - 1) as usize).unwrap();
            assert_eq!(session.target_symbol(r), Some(symbol));
        }
        assert_eq!(session.target_text().unwrap(), "THE");
    }

    #[test]
    fn determinism_and_seed_sensitivity() {
        let config = SimConfig {
            text: "AB".into(),
            seed: 99,
            ..SimConfig::default()
        };
        let a = generate_session(&config).unwrap();
        let b = generate_session(&config).unwrap();
        for (fa, fb) in a.flashes.iter().zip(&b.flashes) {
            assert_eq!(fa.signal, fb.signal);
            assert_eq!(fa.stimulus, fb.stimulus);
        }
        let c = generate_session(&SimConfig {
            seed: 100,
            ..config
        })
        .unwrap();
        assert_ne!(a.flashes[0].signal, c.flashes[0].signal);
    }

    #[test]
    fn spatial_noise_matches_target_correlation() {
        // tau^2 = 1, sigma^2 = 0: residual correlation is Sigma_1 itself
        let config = SimConfig {
            tau2: 1.0,
            sigma2: 0.0,
            text: "THE_QUICK_BROWN_FOX".into(),
            sequences: 11, // 19*11*2 = 418 target flashes, x50 t = 20900 draws
            seed: 17,
            ..SimConfig::default()
        };
        let session = generate_session(&config).unwrap();
        let tpl = make_templates(&config);
        let k = config.channels;
        let mut count = 0usize;
        let mut sums = DMatrix::<f64>::zeros(k, k);
        for f in session.flashes.iter().filter(|f| f.label == Some(true)) {
            for t in 0..config.timepoints {
                let resid: Vec<f64> = (0..k)
                    .map(|ch| f.signal[(ch, t)] as f64 - tpl.target[(ch, t)])
                    .collect();
                for a in 0..k {
                    for b in 0..k {
                        sums[(a, b)] += resid[a] * resid[b];
                    }
                }
                count += 1;
            }
        }
        assert!(count >= 20_000);
        let cov = sums / count as f64;
        let sigma1 = paper_sigma1();
        for a in 0..k {
            for b in 0..k {
                let corr = cov[(a, b)] / (cov[(a, a)] * cov[(b, b)]).sqrt();
                assert!(
                    (corr - sigma1[(a, b)]).abs() < 0.02,
                    "entry ({a},{b}): {corr} vs {}",
                    sigma1[(a, b)]
                );
            }
        }
    }

    #[test]
    fn covariance_separates_conditions_and_shifts_interactions() {
        let config = SimConfig {
            sequences: 6,
            seed: 23,
            ..SimConfig::default()
        }; // baseline tau2 = 9, sigma2 = 20
        let session = generate_session(&config).unwrap();
        let tpl = make_templates(&config);
        let k = config.channels;
        let acc = |want_target: bool| -> (DMatrix<f64>, usize) {
            let mut sums = DMatrix::<f64>::zeros(k, k);
            let mut count = 0usize;
            for f in session
                .flashes
                .iter()
                .filter(|f| f.label == Some(want_target))
            {
                let expect = if want_target { &tpl.target } else { &tpl.nontarget };
                for t in 0..config.timepoints {
                    let resid: Vec<f64> = (0..k)
                        .map(|ch| f.signal[(ch, t)] as f64 - expect[(ch, t)])
                        .collect();
                    for a in 0..k {
                        for b in 0..k {
                            sums[(a, b)] += resid[a] * resid[b];
                        }
                    }
                    count += 1;
                }
            }
            (sums / count as f64, count)
        };
        let (cov_t, n_t) = acc(true);
        assert!(n_t >= 10_000);
        let eye = DMatrix::<f64>::identity(k, k);
        let t1 = paper_sigma1() * config.tau2 + &eye * config.sigma2;
        let t0 = paper_sigma0() * config.tau2 + &eye * config.sigma2;
        let d1 = (&cov_t - &t1).norm();
        let d0 = (&cov_t - &t0).norm();
        assert!(d1 < d0, "target residual cov closer to Sigma_0: {d1} vs {d0}");
        let (cov_n, _) = acc(false);
        let d1 = (&cov_n - &t1).norm();
        let d0 = (&cov_n - &t0).norm();
        assert!(d0 < d1, "non-target residual cov closer to Sigma_1");

        // Fisher-z shift on pair (1,2): Sigma_1 = 0.7 > Sigma_0 = 0.1
        let idx = pair_index(0, 1, k);
        let mean_z = |want: bool| -> f64 {
            let vals: Vec<f64> = session
                .flashes
                .iter()
                .filter(|f| f.label == Some(want))
                .map(|f| f.interaction[idx])
                .collect();
            vals.iter().sum::<f64>() / vals.len() as f64
        };
        assert!(
            mean_z(true) > mean_z(false),
            "target mean z {} vs non-target {}",
            mean_z(true),
            mean_z(false)
        );
    }
}
