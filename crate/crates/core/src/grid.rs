//! Replicate sweeps across generator settings and methods.
//!
//! Each cell trains on a fresh calibration session and decodes an
//! independently generated test session with the same settings. Cell seeds
//! derive from a stable mix of the base seed, the configuration position,
//! and the replicate, so results do not depend on worker scheduling, and
//! every method inside a cell sees the same pair of sessions.

use rayon::prelude::*;
use thiserror::Error;

use crate::data::{assemble_design, assemble_features, SessionData, Standardizer};
use crate::decode::{
    accuracy_curve, eewr, eswr, score_flashes, support_from_draws, FlashScore, ScoreTable,
    SupportMask, SupportRule,
};
use crate::kernel::{build_kl_basis, default_rho_grid, estimate_rho, time_grid, KernelParams};
use crate::sampler::{run_chain, LinkFunction, PosteriorDraws, RtgpConfig};
use crate::sim::{generate_session, truth_support, SimConfig};
use crate::swlda::{fit_swlda, swlda_scores, swlda_support, SwldaConfig, SwldaModel};

#[derive(Debug, Error)]
pub enum GridError {
    #[error("invalid grid configuration: {0}")]
    InvalidConfig(String),
}

/// Registered classification methods.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    SirtgpProbit,
    SirtgpLogit,
    RtgpProbit,
    RtgpLogit,
    Swlda,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::SirtgpProbit => "sirtgp-p",
            Method::SirtgpLogit => "sirtgp-l",
            Method::RtgpProbit => "rtgp-p",
            Method::RtgpLogit => "rtgp-l",
            Method::Swlda => "swlda",
        }
    }

    pub fn link(&self) -> Option<LinkFunction> {
        match self {
            Method::SirtgpProbit | Method::RtgpProbit => Some(LinkFunction::Probit),
            Method::SirtgpLogit | Method::RtgpLogit => Some(LinkFunction::Logit),
            Method::Swlda => None,
        }
    }

    pub fn uses_interactions(&self) -> bool {
        matches!(self, Method::SirtgpProbit | Method::SirtgpLogit)
    }

    pub fn all() -> [Method; 5] {
        [
            Method::SirtgpProbit,
            Method::SirtgpLogit,
            Method::RtgpProbit,
            Method::RtgpLogit,
            Method::Swlda,
        ]
    }
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let norm = s.trim().to_ascii_lowercase().replace('_', "-");
        Method::all()
            .into_iter()
            .find(|m| m.name() == norm)
            .ok_or_else(|| format!("unknown method '{s}'"))
    }
}

/// Kernel-side settings of the fit pipeline.
#[derive(Debug, Clone)]
pub struct KernelSettings {
    pub alpha: f64,
    pub variance_threshold: f64,
    pub rho_grid: Vec<f64>,
}

impl Default for KernelSettings {
    fn default() -> Self {
        Self {
            alpha: 0.01,
            variance_threshold: 0.99,
            rho_grid: default_rho_grid(),
        }
    }
}

/// One-factor-at-a-time sweep around a base generator configuration.
#[derive(Debug, Clone)]
pub struct GridSettings {
    pub base: SimConfig,
    /// Peak-ratio values; each spawns one configuration with the base noise.
    pub peak_ratios: Vec<f64>,
    /// Interaction-strength values.
    pub tau2s: Vec<f64>,
    /// White-noise values.
    pub sigma2s: Vec<f64>,
    pub replicates: usize,
    pub methods: Vec<Method>,
    pub sampler: RtgpConfig,
    pub kernel: KernelSettings,
    pub swlda: SwldaConfig,
    pub seed: u64,
}

impl GridSettings {
    /// The configurations the sweep visits, in declaration order.
    pub fn configurations(&self) -> Vec<SimConfig> {
        let mut out = Vec::new();
        for &a in &self.peak_ratios {
            out.push(SimConfig {
                peak_ratio: a,
                ..self.base.clone()
            });
        }
        for &t2 in &self.tau2s {
            out.push(SimConfig {
                tau2: t2,
                ..self.base.clone()
            });
        }
        for &s2 in &self.sigma2s {
            out.push(SimConfig {
                sigma2: s2,
                ..self.base.clone()
            });
        }
        if out.is_empty() {
            out.push(self.base.clone());
        }
        out
    }
}

/// One (configuration, replicate, method) outcome.
#[derive(Debug, Clone)]
pub struct CellResult {
    pub peak_ratio: f64,
    pub tau2: f64,
    pub sigma2: f64,
    pub replicate: usize,
    pub method: Method,
    /// Final-budget character accuracy; `None` when the method failed.
    pub accuracy: Option<f64>,
    pub eswr: Vec<Option<f64>>,
    pub eewr: Vec<Option<f64>>,
    pub error: Option<String>,
}

/// Mean/SD aggregation of one (configuration, method) column.
#[derive(Debug, Clone)]
pub struct Aggregate {
    pub peak_ratio: f64,
    pub tau2: f64,
    pub sigma2: f64,
    pub method: Method,
    pub n_ok: usize,
    pub mean_accuracy: Option<f64>,
    pub sd_accuracy: Option<f64>,
    pub mean_eswr: Vec<Option<f64>>,
    pub mean_eewr: Vec<Option<f64>>,
}

#[derive(Debug, Clone)]
pub struct GridResults {
    pub cells: Vec<CellResult>,
    pub aggregates: Vec<Aggregate>,
    pub channels: usize,
}

/// Stable seed mixer (splitmix64 over tagged words); independent of worker
/// scheduling and platform hashers.
pub fn mix_seed(base: u64, tags: &[u64]) -> u64 {
    let mut state = base ^ 0x9e37_79b9_7f4a_7c15;
    for &tag in tags {
        state = state.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(tag);
        let mut z = state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        state = z ^ (z >> 31);
    }
    state
}

/// A trained model ready to score a test session.
pub enum FittedModel {
    Rtgp {
        draws: PosteriorDraws,
        standardizer: Standardizer,
    },
    Swlda {
        model: SwldaModel,
        standardizer: Standardizer,
        channels: usize,
        timepoints: usize,
    },
}

/// Train one method on a calibration session.
pub fn fit_method(
    method: Method,
    calibration: &SessionData,
    sampler: &RtgpConfig,
    kernel: &KernelSettings,
    swlda: &SwldaConfig,
    seed: u64,
) -> Result<FittedModel, String> {
    let design = assemble_design(calibration).map_err(|e| e.to_string())?;
    match method {
        Method::Swlda => {
            let model = fit_swlda(&design.x, &design.y, swlda).map_err(|e| e.to_string())?;
            Ok(FittedModel::Swlda {
                model,
                standardizer: design.standardizer.clone(),
                channels: design.channels,
                timepoints: design.timepoints,
            })
        }
        _ => {
            let rho = estimate_rho(calibration, kernel.alpha, &kernel.rho_grid)
                .map_err(|e| e.to_string())?;
            let params = KernelParams::new(kernel.alpha, rho).map_err(|e| e.to_string())?;
            let grid = time_grid(calibration.timepoints);
            let basis = build_kl_basis(&grid, &params, kernel.variance_threshold)
                .map_err(|e| e.to_string())?;
            let config = RtgpConfig {
                link: method.link().expect("bayesian method"),
                use_interactions: method.uses_interactions(),
                seed,
                ..sampler.clone()
            };
            let draws = run_chain(&design, &basis, &config).map_err(|e| e.to_string())?;
            Ok(FittedModel::Rtgp {
                draws,
                standardizer: design.standardizer.clone(),
            })
        }
    }
}

/// Score every flash of a test session with a fitted model.
pub fn score_session(model: &FittedModel, test: &SessionData) -> Result<ScoreTable, String> {
    match model {
        FittedModel::Rtgp {
            draws,
            standardizer,
        } => score_flashes(draws, test, standardizer).map_err(|e| e.to_string()),
        FittedModel::Swlda {
            model,
            standardizer,
            ..
        } => {
            let (x, _) = assemble_features(test, standardizer).map_err(|e| e.to_string())?;
            let scores = swlda_scores(model, &x);
            let entries = test
                .flashes
                .iter()
                .zip(scores)
                .map(|(f, score)| FlashScore {
                    char_index: f.char_index,
                    sequence: f.sequence,
                    stimulus: f.stimulus,
                    score,
                })
                .collect();
            ScoreTable::new(test.n_chars, test.n_sequences, test.n_stimuli, entries)
                .map_err(|e| e.to_string())
        }
    }
}

/// Estimated channel-time support of a fitted model.
pub fn model_support(model: &FittedModel) -> SupportMask {
    match model {
        FittedModel::Rtgp { draws, .. } => support_from_draws(draws, SupportRule::MedianModel),
        FittedModel::Swlda {
            model,
            channels,
            timepoints,
            ..
        } => swlda_support(model, *channels, *timepoints),
    }
}

fn run_cell(
    settings: &GridSettings,
    config_idx: usize,
    config: &SimConfig,
    replicate: usize,
) -> Vec<CellResult> {
    let calib_cfg = SimConfig {
        seed: mix_seed(settings.seed, &[config_idx as u64, replicate as u64, 0]),
        ..config.clone()
    };
    let test_cfg = SimConfig {
        seed: mix_seed(settings.seed, &[config_idx as u64, replicate as u64, 1]),
        ..config.clone()
    };
    let base_cell = |method: Method| CellResult {
        peak_ratio: config.peak_ratio,
        tau2: config.tau2,
        sigma2: config.sigma2,
        replicate,
        method,
        accuracy: None,
        eswr: vec![None; config.channels],
        eewr: vec![None; config.channels],
        error: None,
    };
    let sessions = generate_session(&calib_cfg)
        .and_then(|c| generate_session(&test_cfg).map(|t| (c, t)));
    let (calibration, test) = match sessions {
        Ok(pair) => pair,
        Err(e) => {
            return settings
                .methods
                .iter()
                .map(|&m| CellResult {
                    error: Some(format!("generation failed: {e}")),
                    ..base_cell(m)
                })
                .collect();
        }
    };
    let truth_mask = truth_support(config);
    let truth_text: Vec<char> = config.text.chars().collect();
    settings
        .methods
        .iter()
        .map(|&method| {
            let mut cell = base_cell(method);
            let chain_seed = mix_seed(
                settings.seed,
                &[config_idx as u64, replicate as u64, 2, method as u64],
            );
            let outcome = fit_method(
                method,
                &calibration,
                &settings.sampler,
                &settings.kernel,
                &settings.swlda,
                chain_seed,
            )
            .and_then(|fitted| {
                let table = score_session(&fitted, &test)?;
                let curve =
                    accuracy_curve(&table, &truth_text, &config.layout).map_err(|e| e.to_string())?;
                let est = model_support(&fitted);
                Ok((curve, est))
            });
            match outcome {
                Ok((curve, est)) => {
                    cell.accuracy = curve.last().copied();
                    for k in 0..config.channels {
                        cell.eswr[k] = eswr(&est, &truth_mask, k).ok().flatten();
                        cell.eewr[k] = eewr(&est, &truth_mask, k).ok().flatten();
                    }
                }
                Err(e) => cell.error = Some(e),
            }
            cell
        })
        .collect()
}

fn mean_optional(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let kept: Vec<f64> = values.flatten().collect();
    (!kept.is_empty()).then(|| kept.iter().sum::<f64>() / kept.len() as f64)
}

/// Run the full sweep: every configuration x replicate x method.
pub fn run_grid(settings: &GridSettings) -> Result<GridResults, GridError> {
    if settings.replicates == 0 {
        return Err(GridError::InvalidConfig("need at least 1 replicate".into()));
    }
    if settings.methods.is_empty() {
        return Err(GridError::InvalidConfig("no methods registered".into()));
    }
    let configs = settings.configurations();
    for c in &configs {
        c.validate()
            .map_err(|e| GridError::InvalidConfig(e.to_string()))?;
    }
    let tasks: Vec<(usize, usize)> = (0..configs.len())
        .flat_map(|ci| (0..settings.replicates).map(move |r| (ci, r)))
        .collect();
    let mut cells: Vec<CellResult> = tasks
        .par_iter()
        .flat_map(|&(ci, r)| run_cell(settings, ci, &configs[ci], r))
        .collect();
    // deterministic report order: configuration, replicate, method
    let method_pos = |m: Method| settings.methods.iter().position(|&x| x == m).unwrap();
    let config_pos = |c: &CellResult| {
        configs
            .iter()
            .position(|cfg| {
                cfg.peak_ratio == c.peak_ratio && cfg.tau2 == c.tau2 && cfg.sigma2 == c.sigma2
            })
            .unwrap()
    };
    cells.sort_by_key(|c| (config_pos(c), c.replicate, method_pos(c.method)));
    cells.dedup_by_key(|c| (config_pos(c), c.replicate, method_pos(c.method)));

    let mut aggregates = Vec::new();
    for (ci, config) in configs.iter().enumerate() {
        for &method in &settings.methods {
            let of_group: Vec<&CellResult> = cells
                .iter()
                .filter(|c| config_pos(c) == ci && c.method == method)
                .collect();
            let accs: Vec<f64> = of_group.iter().filter_map(|c| c.accuracy).collect();
            let mean = (!accs.is_empty())
                .then(|| accs.iter().sum::<f64>() / accs.len() as f64);
            let sd = mean.filter(|_| accs.len() > 1).map(|m| {
                (accs.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / (accs.len() - 1) as f64)
                    .sqrt()
            });
            aggregates.push(Aggregate {
                peak_ratio: config.peak_ratio,
                tau2: config.tau2,
                sigma2: config.sigma2,
                method,
                n_ok: accs.len(),
                mean_accuracy: mean,
                sd_accuracy: sd,
                mean_eswr: (0..config.channels)
                    .map(|k| mean_optional(of_group.iter().map(|c| c.eswr[k])))
                    .collect(),
                mean_eewr: (0..config.channels)
                    .map(|k| mean_optional(of_group.iter().map(|c| c.eewr[k])))
                    .collect(),
            });
        }
    }
    Ok(GridResults {
        cells,
        aggregates,
        channels: settings.base.channels,
    })
}

/// Per-cell rows then aggregate rows, one CSV.
pub fn write_grid_csv<W: std::io::Write>(
    results: &GridResults,
    out: &mut W,
) -> std::io::Result<()> {
    let k = results.channels;
    write!(out, "alpha,tau2,sigma2,replicate,method,accuracy,accuracy_sd")?;
    for c in 1..=k {
        write!(out, ",eswr_ch{c}")?;
    }
    for c in 1..=k {
        write!(out, ",eewr_ch{c}")?;
    }
    writeln!(out, ",error")?;
    let fmt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    for cell in &results.cells {
        write!(
            out,
            "{},{},{},{},{},{},",
            cell.peak_ratio,
            cell.tau2,
            cell.sigma2,
            cell.replicate,
            cell.method.name(),
            fmt(cell.accuracy),
        )?;
        for v in &cell.eswr {
            write!(out, ",{}", fmt(*v))?;
        }
        for v in &cell.eewr {
            write!(out, ",{}", fmt(*v))?;
        }
        writeln!(out, ",{}", cell.error.as_deref().unwrap_or(""))?;
    }
    for agg in &results.aggregates {
        write!(
            out,
            "{},{},{},aggregate,{},{},{}",
            agg.peak_ratio,
            agg.tau2,
            agg.sigma2,
            agg.method.name(),
            fmt(agg.mean_accuracy),
            fmt(agg.sd_accuracy),
        )?;
        for v in &agg.mean_eswr {
            write!(out, ",{}", fmt(*v))?;
        }
        for v in &agg.mean_eewr {
            write!(out, ",{}", fmt(*v))?;
        }
        writeln!(out, ",")?;
    }
    Ok(())
}
