//! Command implementations: simulate, fit, evaluate, grid.
//!
//! Every command resolves its configuration (rejecting unknown keys),
//! performs the work, and writes a manifest echoing the fully resolved
//! settings; re-running from a manifest reproduces all numeric outputs byte
//! for byte. Reports are written to a temp file and renamed into place so
//! failures leave no partial outputs.

use std::path::{Path, PathBuf};
use std::time::Instant;

use sirtgp_core::data::{load_session, save_session, DataError};
use sirtgp_core::decode::{
    accuracy_curve, pair_percentiles, pairs_above, score_flashes, support_from_draws,
    utility_curve, write_accuracy_csv, write_pair_table_csv, write_selection_map_csv,
    write_support_metrics_csv, write_utility_csv, SelectionTiming, SupportMask, SupportRule,
};
use sirtgp_core::grid::{mix_seed, run_grid, write_grid_csv, GridSettings};
use sirtgp_core::kernel::{build_kl_basis, estimate_rho, time_grid, KernelError, KernelParams};
use sirtgp_core::sampler::{load_draws, run_chain, save_draws, SamplerError};
use sirtgp_core::sim::{generate_session, truth_support, SimConfig};
use sirtgp_core::{assemble_design, SessionData};

use crate::config::{
    echo_evaluate, echo_fit, echo_grid, echo_kernel, echo_sim, echo_swlda, parse_evaluate,
    parse_fit, parse_grid, parse_kernel, parse_sim, parse_swlda, resolve_workers, RawConfig,
};

/// Command failure with its process exit code: 1 config, 2 I/O, 3 numeric.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            message: message.into(),
        }
    }

    pub fn io(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }

    pub fn numeric(message: impl Into<String>) -> Self {
        Self {
            code: 3,
            message: message.into(),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::InvalidInput(_) | DataError::Structural(_) => {
                CliError::config(e.to_string())
            }
            _ => CliError::io(e.to_string()),
        }
    }
}

impl From<SamplerError> for CliError {
    fn from(e: SamplerError) -> Self {
        match e {
            SamplerError::InvalidConfig(_) | SamplerError::Structural(_) => {
                CliError::config(e.to_string())
            }
            SamplerError::NumericalFailure { .. } => CliError::numeric(e.to_string()),
            _ => CliError::io(e.to_string()),
        }
    }
}

impl From<KernelError> for CliError {
    fn from(e: KernelError) -> Self {
        match e {
            KernelError::InvalidInput(_) => CliError::config(e.to_string()),
            KernelError::Estimation(_) => CliError::numeric(e.to_string()),
        }
    }
}

fn read_config(path: &Path) -> Result<RawConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::io(format!("cannot read config {}: {e}", path.display())))?;
    RawConfig::parse(&text).map_err(CliError::config)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(format!(".tmp-{}", std::process::id()));
    let tmp = path.with_file_name(name);
    std::fs::write(&tmp, bytes)
        .and_then(|()| std::fs::rename(&tmp, path))
        .map_err(|e| {
            let _ = std::fs::remove_file(&tmp);
            CliError::io(format!("cannot write {}: {e}", path.display()))
        })
}

fn ensure_dir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path)
        .map_err(|e| CliError::io(format!("cannot create {}: {e}", path.display())))
}

fn write_mask_csv(mask: &SupportMask) -> String {
    let mut out = String::from("channel,time_index,active\n");
    for k in 0..mask.channels {
        for t in 0..mask.timepoints {
            out.push_str(&format!("{},{},{}\n", k + 1, t + 1, u8::from(mask.get(k, t))));
        }
    }
    out
}

fn read_mask_csv(path: &Path) -> Result<SupportMask, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::io(format!("cannot read mask {}: {e}", path.display())))?;
    let mut cells: Vec<(usize, usize, bool)> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 3 {
            return Err(CliError::config(format!(
                "mask line {} must be channel,time_index,active",
                i + 1
            )));
        }
        let k: usize = parts[0]
            .trim()
            .parse()
            .map_err(|_| CliError::config("bad channel in mask"))?;
        let t: usize = parts[1]
            .trim()
            .parse()
            .map_err(|_| CliError::config("bad time index in mask"))?;
        let active = matches!(parts[2].trim(), "1" | "true");
        cells.push((k, t, active));
    }
    let channels = cells.iter().map(|c| c.0).max().unwrap_or(0);
    let timepoints = cells.iter().map(|c| c.1).max().unwrap_or(0);
    if channels == 0 || timepoints == 0 || cells.len() != channels * timepoints {
        return Err(CliError::config("mask csv does not cover a full grid"));
    }
    let mut mask = SupportMask::new(channels, timepoints);
    for (k, t, active) in cells {
        mask.set(k - 1, t - 1, active);
    }
    Ok(mask)
}

/// Generate a calibration and a test session plus the truth support mask.
pub fn cmd_simulate(
    config_path: &Path,
    out_dir: &Path,
    seed_override: Option<u64>,
) -> Result<(), CliError> {
    let raw = read_config(config_path)?;
    raw.check_sections(&["simulate", "kernel", "fit", "evaluate", "grid", "swlda"])
        .map_err(CliError::config)?;
    let mut config = parse_sim(&raw).map_err(CliError::config)?;
    if let Some(seed) = seed_override {
        config.seed = seed;
    }
    ensure_dir(out_dir)?;
    let calibration = generate_session(&SimConfig {
        seed: mix_seed(config.seed, &[1]),
        ..config.clone()
    })
    .map_err(|e| CliError::numeric(e.to_string()))?;
    let test = generate_session(&SimConfig {
        seed: mix_seed(config.seed, &[2]),
        ..config.clone()
    })
    .map_err(|e| CliError::numeric(e.to_string()))?;
    save_session(&calibration, &out_dir.join("calibration.eegs"))?;
    save_session(&test, &out_dir.join("test.eegs"))?;
    write_atomic(
        &out_dir.join("truth_mask.csv"),
        write_mask_csv(&truth_support(&config)).as_bytes(),
    )?;
    let mut interactions = Vec::new();
    sirtgp_core::data::export_interactions_csv(&calibration, &mut interactions)?;
    write_atomic(&out_dir.join("interactions.csv"), &interactions)?;
    let manifest = format!(
        "# sirtgp simulate manifest\n\
         # outputs: calibration.eegs, test.eegs, truth_mask.csv\n\
         # session seeds derive from the base seed (calibration tag 1, test tag 2)\n\
         {}",
        echo_sim(&config)
    );
    write_atomic(&out_dir.join("manifest.ini"), manifest.as_bytes())?;
    println!(
        "simulate: wrote {} flashes per session to {}",
        calibration.n_flashes(),
        out_dir.display()
    );
    Ok(())
}

/// Fit the model on a labeled session and persist the posterior draws.
pub fn cmd_fit(
    config_path: &Path,
    session_path: &Path,
    out_path: &Path,
    seed_override: Option<u64>,
) -> Result<(), CliError> {
    let raw = read_config(config_path)?;
    raw.check_sections(&["simulate", "kernel", "fit", "evaluate", "grid", "swlda"])
        .map_err(CliError::config)?;
    let kernel = parse_kernel(&raw).map_err(CliError::config)?;
    let mut sampler = parse_fit(&raw).map_err(CliError::config)?;
    if let Some(seed) = seed_override {
        sampler.seed = seed;
    }
    let session = load_session(session_path)?;
    if !session.is_labeled() {
        return Err(CliError::config(
            "fit needs a fully labeled calibration session",
        ));
    }
    let started = Instant::now();
    let design = assemble_design(&session)?;
    let rho = estimate_rho(&session, kernel.alpha, &kernel.rho_grid)?;
    let params = KernelParams::new(kernel.alpha, rho)?;
    let basis = build_kl_basis(
        &time_grid(session.timepoints),
        &params,
        kernel.variance_threshold,
    )?;
    let draws = run_chain(&design, &basis, &sampler)?;
    save_draws(&draws, out_path)?;
    let wall = started.elapsed().as_secs_f64();
    let report = format!(
        "fit report\n\
         session = {}\n\
         n_flashes = {}\n\
         channels = {}\n\
         timepoints = {}\n\
         rho = {rho}\n\
         rank = {}\n\
         variance_fraction = {}\n\
         draws = {}\n\
         degenerate_columns = {}\n\
         numeric_checks = passed\n\
         wall_seconds = {wall:.1}\n",
        session_path.display(),
        session.n_flashes(),
        session.channels,
        session.timepoints,
        basis.rank,
        basis.variance_fraction,
        draws.n_draws,
        design
            .standardizer
            .scales
            .iter()
            .filter(|&&s| s == 0.0)
            .count(),
    );
    write_atomic(&report_path(out_path), report.as_bytes())?;
    let manifest = format!(
        "# sirtgp fit manifest\n# session: {}\n# draws: {}\n{}{}",
        session_path.display(),
        out_path.display(),
        echo_kernel(&kernel),
        echo_fit(&sampler),
    );
    write_atomic(&manifest_path(out_path), manifest.as_bytes())?;
    println!(
        "fit: rho {rho:.3}, rank {}, {} draws in {wall:.1}s -> {}",
        basis.rank,
        draws.n_draws,
        out_path.display()
    );
    Ok(())
}

fn report_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".report.txt");
    out.with_file_name(name)
}

fn manifest_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.ini");
    out.with_file_name(name)
}

fn truth_chars(
    session: &SessionData,
    requested: Option<&str>,
) -> Result<Vec<char>, CliError> {
    if let Some(text) = requested {
        let chars: Vec<char> = text.chars().collect();
        if chars.len() != session.n_chars {
            return Err(CliError::config(format!(
                "truth text has {} characters, session spells {}",
                chars.len(),
                session.n_chars
            )));
        }
        return Ok(chars);
    }
    session
        .target_text()
        .map(|t| t.chars().collect())
        .ok_or_else(|| {
            CliError::config(
                "test session is unlabeled; supply truth_text in [evaluate]".to_string(),
            )
        })
}

/// Score a test session from persisted draws and emit the CSV reports.
pub fn cmd_evaluate(
    config_path: Option<&Path>,
    draws_path: &Path,
    session_path: &Path,
    out_dir: &Path,
) -> Result<(), CliError> {
    let options = match config_path {
        None => parse_evaluate(&RawConfig::default()).map_err(CliError::config)?,
        Some(p) => {
            let raw = read_config(p)?;
            raw.check_sections(&["simulate", "kernel", "fit", "evaluate", "grid", "swlda"])
                .map_err(CliError::config)?;
            parse_evaluate(&raw).map_err(CliError::config)?
        }
    };
    let draws = load_draws(draws_path)?;
    let session = load_session(session_path)?;
    if draws.channels != session.channels || draws.timepoints != session.timepoints {
        return Err(CliError::config(format!(
            "draws are {}x{} but session is {}x{}",
            draws.channels, draws.timepoints, session.channels, session.timepoints
        )));
    }
    ensure_dir(out_dir)?;
    let truth = truth_chars(&session, options.truth_text.as_deref())?;
    let table = score_flashes(&draws, &session, &draws.standardizer)
        .map_err(|e| CliError::config(e.to_string()))?;
    let curve =
        accuracy_curve(&table, &truth, &session.layout).map_err(|e| CliError::config(e.to_string()))?;
    let timing = SelectionTiming::from(&session);
    let utility = utility_curve(&curve, &timing, session.layout.n_symbols())
        .map_err(|e| CliError::config(e.to_string()))?;

    let mut buf = Vec::new();
    write_accuracy_csv(&curve, &mut buf).map_err(|e| CliError::io(e.to_string()))?;
    write_atomic(&out_dir.join("accuracy.csv"), &buf)?;
    buf.clear();
    write_utility_csv(&utility, &mut buf).map_err(|e| CliError::io(e.to_string()))?;
    write_atomic(&out_dir.join("utility.csv"), &buf)?;

    let (field_incl, pair_incl) = draws.posterior_inclusion();
    buf.clear();
    write_selection_map_csv(&field_incl, &mut buf).map_err(|e| CliError::io(e.to_string()))?;
    write_atomic(&out_dir.join("selection_field.csv"), &buf)?;
    buf.clear();
    write_pair_table_csv(&pair_incl, session.channels, "inclusion_prob", &mut buf)
        .map_err(|e| CliError::io(e.to_string()))?;
    write_atomic(&out_dir.join("selection_pairs.csv"), &buf)?;

    if draws.pairs >= 1 {
        let percentiles =
            pair_percentiles(&[pair_incl.clone()]).map_err(|e| CliError::config(e.to_string()))?;
        buf.clear();
        write_pair_table_csv(&percentiles, session.channels, "avg_percentile", &mut buf)
            .map_err(|e| CliError::io(e.to_string()))?;
        write_atomic(&out_dir.join("pair_percentiles.csv"), &buf)?;
        let edges = pairs_above(&percentiles, session.channels, options.edge_threshold);
        let mut edge_csv = String::from("k1,k2,avg_percentile\n");
        for (k1, k2, p) in edges {
            edge_csv.push_str(&format!("{k1},{k2},{p}\n"));
        }
        write_atomic(&out_dir.join("pair_edges.csv"), edge_csv.as_bytes())?;
    }

    if let Some(mask_path) = &options.support_truth {
        let truth_mask = read_mask_csv(Path::new(mask_path))?;
        if truth_mask.channels != session.channels || truth_mask.timepoints != session.timepoints {
            return Err(CliError::config(format!(
                "truth mask is {}x{} but session is {}x{}",
                truth_mask.channels, truth_mask.timepoints, session.channels, session.timepoints
            )));
        }
        let est = support_from_draws(&draws, SupportRule::MedianModel);
        buf.clear();
        write_support_metrics_csv(&est, &truth_mask, &mut buf)
            .map_err(|e| CliError::config(e.to_string()))?;
        write_atomic(&out_dir.join("support_metrics.csv"), &buf)?;
    }

    let manifest = format!(
        "# sirtgp evaluate manifest\n# draws: {}\n# session: {}\n{}",
        draws_path.display(),
        session_path.display(),
        echo_evaluate(&options),
    );
    write_atomic(&out_dir.join("manifest.ini"), manifest.as_bytes())?;
    println!(
        "evaluate: final-budget accuracy {:.4} over {} characters -> {}",
        curve.last().copied().unwrap_or(f64::NAN),
        session.n_chars,
        out_dir.display()
    );
    Ok(())
}

/// Run the replicate sweep and write the results table.
pub fn cmd_grid(
    config_path: &Path,
    out_dir: &Path,
    seed_override: Option<u64>,
) -> Result<(), CliError> {
    let raw = read_config(config_path)?;
    raw.check_sections(&["simulate", "kernel", "fit", "evaluate", "grid", "swlda"])
        .map_err(CliError::config)?;
    let base = parse_sim(&raw).map_err(CliError::config)?;
    let kernel = parse_kernel(&raw).map_err(CliError::config)?;
    let mut sampler = parse_fit(&raw).map_err(CliError::config)?;
    sampler.progress = false; // per-cell progress would interleave across workers
    let swlda = parse_swlda(&raw).map_err(CliError::config)?;
    let mut grid_options = parse_grid(&raw).map_err(CliError::config)?;
    if let Some(seed) = seed_override {
        grid_options.seed = seed;
    }
    ensure_dir(out_dir)?;
    let settings = GridSettings {
        base: base.clone(),
        peak_ratios: grid_options.peak_ratios.clone(),
        tau2s: grid_options.tau2s.clone(),
        sigma2s: grid_options.sigma2s.clone(),
        replicates: grid_options.replicates,
        methods: grid_options.methods.clone(),
        sampler: sampler.clone(),
        kernel: kernel.clone(),
        swlda,
        seed: grid_options.seed,
    };
    let n_configs = settings.configurations().len();
    let sampler_cells = n_configs
        * settings.replicates
        * settings
            .methods
            .iter()
            .filter(|m| m.link().is_some())
            .count();
    let workers = resolve_workers(grid_options.workers);
    let long_running = sampler_cells * sampler.iterations > 200 * 3000;
    eprintln!(
        "grid: {n_configs} configurations x {} replicates x {} methods on {workers} workers{}",
        settings.replicates,
        settings.methods.len(),
        if long_running { " (long-running)" } else { "" },
    );
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| CliError::config(e.to_string()))?;
    let started = Instant::now();
    let results = pool
        .install(|| run_grid(&settings))
        .map_err(|e| CliError::config(e.to_string()))?;
    let mut buf = Vec::new();
    write_grid_csv(&results, &mut buf).map_err(|e| CliError::io(e.to_string()))?;
    write_atomic(&out_dir.join("grid_results.csv"), &buf)?;
    let manifest = format!(
        "# sirtgp grid manifest\n\
         # sampler cells: {sampler_cells}{}\n\
         {}{}{}{}{}",
        if long_running { " (long-running)" } else { "" },
        echo_sim(&base),
        echo_kernel(&kernel),
        echo_fit(&sampler),
        echo_swlda(&settings.swlda),
        echo_grid(&grid_options),
    );
    write_atomic(&out_dir.join("manifest.ini"), manifest.as_bytes())?;
    let failures = results.cells.iter().filter(|c| c.error.is_some()).count();
    println!(
        "grid: {} cells ({failures} failures) in {:.1}s -> {}",
        results.cells.len(),
        started.elapsed().as_secs_f64(),
        out_dir.display()
    );
    Ok(())
}
