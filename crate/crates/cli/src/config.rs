//! Sectioned key = value run configuration.
//!
//! The format is deliberately plain: `[section]` headers, one `key = value`
//! per line, `#`/`;` comments. Unknown sections or keys are rejected so a
//! typo cannot silently fall back to a default, and every command echoes its
//! fully resolved configuration as a manifest that parses back identically.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use sirtgp_core::grid::{KernelSettings, Method};
use sirtgp_core::kernel::default_rho_grid;
use sirtgp_core::sampler::{LinkFunction, OmegaGrid, RtgpConfig, Xi2Schedule};
use sirtgp_core::sim::{paper_sigma0, paper_sigma1, SimConfig, TemplateParams};
use sirtgp_core::swlda::SwldaConfig;
use sirtgp_core::SpellerLayout;

/// Raw parsed sections, preserving declaration order.
#[derive(Debug, Default)]
pub struct RawConfig {
    sections: Vec<(String, Vec<(String, String)>)>,
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self, String> {
        let mut sections: Vec<(String, Vec<(String, String)>)> = Vec::new();
        for (lineno, raw_line) in text.lines().enumerate() {
            let line = raw_line.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| format!("line {}: unterminated section header", lineno + 1))?;
                sections.push((name.trim().to_string(), Vec::new()));
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| format!("line {}: expected key = value", lineno + 1))?;
            let section = sections
                .last_mut()
                .ok_or_else(|| format!("line {}: key outside any [section]", lineno + 1))?;
            let key = key.trim().to_string();
            if section.1.iter().any(|(k, _)| *k == key) {
                return Err(format!(
                    "line {}: duplicate key '{}' in [{}]",
                    lineno + 1,
                    key,
                    section.0
                ));
            }
            section.1.push((key, value.trim().to_string()));
        }
        Ok(Self { sections })
    }

    pub fn section(&self, name: &str) -> Option<&[(String, String)]> {
        self.sections
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, kv)| kv.as_slice())
    }

    /// Reject sections this command does not understand.
    pub fn check_sections(&self, allowed: &[&str]) -> Result<(), String> {
        for (name, _) in &self.sections {
            if !allowed.contains(&name.as_str()) {
                return Err(format!("unknown section [{name}]"));
            }
        }
        Ok(())
    }
}

/// Typed reads over one section with unknown-key rejection.
pub struct SectionReader<'a> {
    name: &'a str,
    entries: &'a [(String, String)],
    used: BTreeSet<&'a str>,
}

impl<'a> SectionReader<'a> {
    pub fn new(raw: &'a RawConfig, name: &'a str) -> Self {
        Self {
            name,
            entries: raw.section(name).unwrap_or(&[]),
            used: BTreeSet::new(),
        }
    }

    fn lookup(&mut self, key: &str) -> Option<&'a str> {
        for (k, v) in self.entries {
            if k == key {
                self.used.insert(k.as_str());
                return Some(v.as_str());
            }
        }
        None
    }

    pub fn parse<T: std::str::FromStr>(&mut self, key: &str, default: T) -> Result<T, String>
    where
        T::Err: std::fmt::Display,
    {
        match self.lookup(key) {
            None => Ok(default),
            Some(v) => v
                .parse::<T>()
                .map_err(|e| format!("[{}] {key}: {e}", self.name)),
        }
    }

    pub fn string(&mut self, key: &str, default: &str) -> String {
        self.lookup(key).unwrap_or(default).to_string()
    }

    pub fn optional_string(&mut self, key: &str) -> Option<String> {
        self.lookup(key).map(|s| s.to_string())
    }

    pub fn float_list(&mut self, key: &str, default: &[f64]) -> Result<Vec<f64>, String> {
        match self.lookup(key) {
            None => Ok(default.to_vec()),
            Some(v) if v.trim().is_empty() => Ok(Vec::new()),
            Some(v) => v
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse::<f64>()
                        .map_err(|e| format!("[{}] {key}: {e}", self.name))
                })
                .collect(),
        }
    }

    /// Every key must have been consumed.
    pub fn finish(self) -> Result<(), String> {
        for (k, _) in self.entries {
            if !self.used.contains(k.as_str()) {
                return Err(format!("unknown key '{}' in [{}]", k, self.name));
            }
        }
        Ok(())
    }
}

fn parse_matrix(
    reader: &mut SectionReader,
    key: &str,
    channels: usize,
    default: nalgebra::DMatrix<f64>,
) -> Result<nalgebra::DMatrix<f64>, String> {
    let values = reader.float_list(key, &[])?;
    if values.is_empty() {
        return Ok(default);
    }
    if values.len() != channels * channels {
        return Err(format!(
            "{key} needs {} values for {channels} channels, got {}",
            channels * channels,
            values.len()
        ));
    }
    Ok(nalgebra::DMatrix::from_row_slice(
        channels, channels, &values,
    ))
}

/// [simulate] section -> generator configuration.
pub fn parse_sim(raw: &RawConfig) -> Result<SimConfig, String> {
    let defaults = SimConfig::default();
    let mut r = SectionReader::new(raw, "simulate");
    let channels = r.parse("channels", defaults.channels)?;
    let config = SimConfig {
        peak_ratio: r.parse("alpha", defaults.peak_ratio)?,
        tau2: r.parse("tau2", defaults.tau2)?,
        sigma2: r.parse("sigma2", defaults.sigma2)?,
        channels,
        timepoints: r.parse("timepoints", defaults.timepoints)?,
        sequences: r.parse("sequences", defaults.sequences)?,
        text: r.string("text", &defaults.text),
        layout: SpellerLayout::default_6x6(),
        sigma1: parse_matrix(&mut r, "sigma1", channels, paper_sigma1())?,
        sigma0: parse_matrix(&mut r, "sigma0", channels, paper_sigma0())?,
        template: TemplateParams {
            amplitude: r.parse("amplitude", defaults.template.amplitude)?,
            width: r.parse("width", defaults.template.width)?,
            centers: r.float_list("centers", &defaults.template.centers)?,
            support_radius: r.parse("support_radius", defaults.template.support_radius)?,
        },
        sample_rate: r.parse("sample_rate", defaults.sample_rate)?,
        display_ms: r.parse("display_ms", defaults.display_ms)?,
        pause_ms: r.parse("pause_ms", defaults.pause_ms)?,
        seed: r.parse("seed", defaults.seed)?,
    };
    r.finish()?;
    config.validate().map_err(|e| e.to_string())?;
    Ok(config)
}

fn join(values: &[f64]) -> String {
    values
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(", ")
}

pub fn echo_sim(config: &SimConfig) -> String {
    let mut out = String::from("[simulate]\n");
    let _ = writeln!(out, "alpha = {}", config.peak_ratio);
    let _ = writeln!(out, "tau2 = {}", config.tau2);
    let _ = writeln!(out, "sigma2 = {}", config.sigma2);
    let _ = writeln!(out, "channels = {}", config.channels);
    let _ = writeln!(out, "timepoints = {}", config.timepoints);
    let _ = writeln!(out, "sequences = {}", config.sequences);
    let _ = writeln!(out, "text = {}", config.text);
    let _ = writeln!(out, "amplitude = {}", config.template.amplitude);
    let _ = writeln!(out, "width = {}", config.template.width);
    let _ = writeln!(out, "centers = {}", join(&config.template.centers));
    let _ = writeln!(out, "support_radius = {}", config.template.support_radius);
    let _ = writeln!(out, "sample_rate = {}", config.sample_rate);
    let _ = writeln!(out, "display_ms = {}", config.display_ms);
    let _ = writeln!(out, "pause_ms = {}", config.pause_ms);
    let _ = writeln!(out, "sigma1 = {}", join(config.sigma1.transpose().as_slice()));
    let _ = writeln!(out, "sigma0 = {}", join(config.sigma0.transpose().as_slice()));
    let _ = writeln!(out, "seed = {}", config.seed);
    out
}

/// [kernel] section -> kernel settings.
pub fn parse_kernel(raw: &RawConfig) -> Result<KernelSettings, String> {
    let defaults = KernelSettings::default();
    let mut r = SectionReader::new(raw, "kernel");
    let settings = KernelSettings {
        alpha: r.parse("alpha", defaults.alpha)?,
        variance_threshold: r.parse("variance_threshold", defaults.variance_threshold)?,
        rho_grid: r.float_list("rho_grid", &default_rho_grid())?,
    };
    r.finish()?;
    if settings.rho_grid.is_empty() {
        return Err("[kernel] rho_grid must be non-empty".into());
    }
    Ok(settings)
}

pub fn echo_kernel(settings: &KernelSettings) -> String {
    let mut out = String::from("[kernel]\n");
    let _ = writeln!(out, "alpha = {}", settings.alpha);
    let _ = writeln!(out, "variance_threshold = {}", settings.variance_threshold);
    let _ = writeln!(out, "rho_grid = {}", join(&settings.rho_grid));
    out
}

/// [fit] section -> sampler configuration.
pub fn parse_fit(raw: &RawConfig) -> Result<RtgpConfig, String> {
    let defaults = RtgpConfig::default();
    let mut r = SectionReader::new(raw, "fit");
    let link: String = r.string("link", defaults.link.name());
    let config = RtgpConfig {
        link: link.parse::<LinkFunction>()?,
        use_interactions: r.parse("use_interactions", defaults.use_interactions)?,
        iterations: r.parse("iterations", defaults.iterations)?,
        burn_in: r.parse("burn_in", defaults.burn_in)?,
        thin: r.parse("thin", defaults.thin)?,
        sigma_e2: r.parse("sigma_e2", defaults.sigma_e2)?,
        a_eta: r.parse("a_eta", defaults.a_eta)?,
        b_eta: r.parse("b_eta", defaults.b_eta)?,
        xi2: Xi2Schedule {
            warm_iters: r.parse("warm_iters", defaults.xi2.warm_iters)?,
            start: r.parse("xi2_start", defaults.xi2.start)?,
            end: r.parse("xi2_end", defaults.xi2.end)?,
        },
        omega: OmegaGrid {
            points: r.parse("omega_points", defaults.omega.points)?,
            lower_q: r.parse("omega_lower_q", defaults.omega.lower_q)?,
            upper_q: r.parse("omega_upper_q", defaults.omega.upper_q)?,
        },
        adapt_thresholds: r.parse("adapt_thresholds", defaults.adapt_thresholds)?,
        seed: r.parse("seed", defaults.seed)?,
        progress: r.parse("progress", true)?,
    };
    r.finish()?;
    config.validate().map_err(|e| e.to_string())?;
    Ok(config)
}

pub fn echo_fit(config: &RtgpConfig) -> String {
    let mut out = format!("[fit]\n{}", config.canonical_echo());
    let _ = writeln!(out, "progress = {}", config.progress);
    out
}

/// [evaluate] section options.
#[derive(Debug, Clone)]
pub struct EvaluateOptions {
    pub truth_text: Option<String>,
    pub support_truth: Option<String>,
    pub edge_threshold: f64,
}

pub fn parse_evaluate(raw: &RawConfig) -> Result<EvaluateOptions, String> {
    let mut r = SectionReader::new(raw, "evaluate");
    let options = EvaluateOptions {
        truth_text: r.optional_string("truth_text"),
        support_truth: r.optional_string("support_truth"),
        edge_threshold: r.parse("edge_threshold", 75.0)?,
    };
    r.finish()?;
    Ok(options)
}

pub fn echo_evaluate(options: &EvaluateOptions) -> String {
    let mut out = String::from("[evaluate]\n");
    if let Some(t) = &options.truth_text {
        let _ = writeln!(out, "truth_text = {t}");
    }
    if let Some(p) = &options.support_truth {
        let _ = writeln!(out, "support_truth = {p}");
    }
    let _ = writeln!(out, "edge_threshold = {}", options.edge_threshold);
    out
}

/// [grid] section sweep parameters.
#[derive(Debug, Clone)]
pub struct GridOptions {
    pub peak_ratios: Vec<f64>,
    pub tau2s: Vec<f64>,
    pub sigma2s: Vec<f64>,
    pub replicates: usize,
    pub methods: Vec<Method>,
    pub workers: usize,
    pub seed: u64,
}

pub fn parse_grid(raw: &RawConfig) -> Result<GridOptions, String> {
    let mut r = SectionReader::new(raw, "grid");
    let methods_text = r.string("methods", "sirtgp-p, rtgp-p, swlda");
    let methods: Vec<Method> = methods_text
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.parse::<Method>())
        .collect::<Result<_, _>>()?;
    let options = GridOptions {
        peak_ratios: r.float_list("alphas", &[])?,
        tau2s: r.float_list("tau2s", &[])?,
        sigma2s: r.float_list("sigma2s", &[])?,
        replicates: r.parse("replicates", 10usize)?,
        methods,
        workers: r.parse("workers", 0usize)?,
        seed: r.parse("seed", 42u64)?,
    };
    r.finish()?;
    if options.methods.is_empty() {
        return Err("[grid] methods must list at least one method".into());
    }
    if options.replicates == 0 {
        return Err("[grid] replicates must be at least 1".into());
    }
    Ok(options)
}

pub fn echo_grid(options: &GridOptions) -> String {
    let mut out = String::from("[grid]\n");
    let _ = writeln!(out, "alphas = {}", join(&options.peak_ratios));
    let _ = writeln!(out, "tau2s = {}", join(&options.tau2s));
    let _ = writeln!(out, "sigma2s = {}", join(&options.sigma2s));
    let _ = writeln!(out, "replicates = {}", options.replicates);
    let _ = writeln!(
        out,
        "methods = {}",
        options
            .methods
            .iter()
            .map(|m| m.name())
            .collect::<Vec<_>>()
            .join(", ")
    );
    let _ = writeln!(out, "workers = {}", options.workers);
    let _ = writeln!(out, "seed = {}", options.seed);
    out
}

/// Resolve the worker count: config key wins, then the environment variable,
/// then every core.
pub fn resolve_workers(config_value: usize) -> usize {
    if config_value > 0 {
        return config_value;
    }
    if let Ok(v) = std::env::var("SIRTGP_WORKERS") {
        if let Ok(n) = v.parse::<usize>() {
            if n > 0 {
                return n;
            }
        }
    }
    std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
}

/// [swlda] section; the classical thresholds are the defaults.
pub fn parse_swlda(raw: &RawConfig) -> Result<SwldaConfig, String> {
    let defaults = SwldaConfig::default();
    let mut r = SectionReader::new(raw, "swlda");
    let config = SwldaConfig {
        p_enter: r.parse("p_enter", defaults.p_enter)?,
        p_remove: r.parse("p_remove", defaults.p_remove)?,
        max_features: r.parse("max_features", defaults.max_features)?,
    };
    r.finish()?;
    Ok(config)
}

pub fn echo_swlda(config: &SwldaConfig) -> String {
    format!(
        "[swlda]\np_enter = {}\np_remove = {}\nmax_features = {}\n",
        config.p_enter, config.p_remove, config.max_features
    )
}
