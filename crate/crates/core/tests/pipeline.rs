//! End-to-end pipeline checks on small synthetic sessions: container round
//! trips, fit-score-decode flow, draws persistence, and the smoothness
//! estimator's self-consistency.

use nalgebra::{Cholesky, DMatrix};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sirtgp_core::data::{assemble_design, load_session, save_session, DataError};
use sirtgp_core::decode::{accuracy_curve, score_flashes};
use sirtgp_core::kernel::{estimate_rho, gram_matrix, per_channel_rho, KernelParams};
use sirtgp_core::sampler::{load_draws, run_chain, save_draws, RtgpConfig, Xi2Schedule};
use sirtgp_core::sim::{generate_session, SimConfig};
use sirtgp_core::{
    build_kl_basis, time_grid, FlashRecord, SessionData, SpellerLayout,
};
use std::path::PathBuf;

fn temp_path(name: &str) -> PathBuf {
    let mut p = std::env::temp_dir();
    p.push(format!("sirtgp-test-{}-{name}", std::process::id()));
    p
}

fn small_config(seed: u64) -> SimConfig {
    SimConfig {
        text: "HIVE".into(),
        sequences: 3,
        seed,
        ..SimConfig::default()
    }
}

#[test]
fn container_round_trip_is_bit_exact() {
    let session = generate_session(&small_config(41)).unwrap();
    let path = temp_path("roundtrip.eegs");
    save_session(&session, &path).unwrap();
    let loaded = load_session(&path).unwrap();
    assert_eq!(loaded.channels, session.channels);
    assert_eq!(loaded.timepoints, session.timepoints);
    assert_eq!(loaded.n_chars, session.n_chars);
    assert_eq!(loaded.n_sequences, session.n_sequences);
    assert_eq!(loaded.sample_rate, session.sample_rate);
    assert_eq!(loaded.display_ms, session.display_ms);
    assert_eq!(loaded.pause_ms, session.pause_ms);
    assert_eq!(loaded.channel_names, session.channel_names);
    for (a, b) in loaded.flashes.iter().zip(&session.flashes) {
        assert_eq!(a.char_index, b.char_index);
        assert_eq!(a.sequence, b.sequence);
        assert_eq!(a.stimulus, b.stimulus);
        assert_eq!(a.label, b.label);
        assert_eq!(a.signal, b.signal);
        assert_eq!(a.interaction, b.interaction);
    }
    // saving the loaded session reproduces the file byte for byte
    let path2 = temp_path("roundtrip2.eegs");
    save_session(&loaded, &path2).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    let _ = std::fs::remove_file(&path);
    let _ = std::fs::remove_file(&path2);
}

#[test]
fn container_error_codes_are_distinct() {
    let session = generate_session(&small_config(43)).unwrap();
    let path = temp_path("errors.eegs");
    save_session(&session, &path).unwrap();
    let good = std::fs::read(&path).unwrap();

    // bad magic
    let mut bad = good.clone();
    bad[0] = b'X';
    std::fs::write(&path, &bad).unwrap();
    assert!(matches!(load_session(&path), Err(DataError::BadMagic)));

    // bumped version byte
    let mut bad = good.clone();
    bad[4] = 0xFE;
    std::fs::write(&path, &bad).unwrap();
    assert!(matches!(
        load_session(&path),
        Err(DataError::UnsupportedVersion(_))
    ));

    // truncated payload: drop the last flash block
    let flash_bytes = 2 + 2 + 2 + 1 + session.channels * session.timepoints * 4;
    let truncated = good[..good.len() - flash_bytes].to_vec();
    std::fs::write(&path, &truncated).unwrap();
    assert!(matches!(load_session(&path), Err(DataError::Truncated)));

    // header/flash-count inconsistency: n field disagrees with R*S*J
    let mut bad = good.clone();
    let n = session.n_flashes() as u32;
    bad[26..30].copy_from_slice(&(n - 12).to_le_bytes());
    std::fs::write(&path, &bad).unwrap();
    assert!(matches!(
        load_session(&path),
        Err(DataError::DimensionMismatch(_))
    ));
    let _ = std::fs::remove_file(&path);
}

#[test]
fn design_standardization_round_trips() {
    let session = generate_session(&small_config(47)).unwrap();
    let design = assemble_design(&session).unwrap();
    let t = session.timepoints;
    for (i, flash) in session.flashes.iter().enumerate().step_by(17) {
        for (k, tt) in [(0usize, 3usize), (2, 10), (5, t - 1)] {
            let col = k * t + tt;
            let raw = flash.signal[(k, tt)] as f64;
            let recovered = design.standardizer.destandardize(col, design.x[(i, col)]);
            assert!((recovered - raw).abs() < 1e-10, "col {col}");
        }
    }
    // constant channel: columns zeroed, flagged degenerate
    let layout = SpellerLayout::default_6x6();
    let mut flashes = Vec::new();
    for f in &session.flashes {
        let mut signal = f.signal.clone();
        for tt in 0..t {
            signal[(1, tt)] = 7.5;
        }
        flashes.push(FlashRecord::new(
            f.char_index,
            f.sequence,
            f.stimulus,
            f.label,
            signal,
        ));
    }
    let constant = SessionData::new(
        session.channels,
        t,
        session.sample_rate,
        session.display_ms,
        session.pause_ms,
        layout,
        session.channel_names.clone(),
        flashes,
    )
    .unwrap();
    let design2 = assemble_design(&constant).unwrap();
    assert!(design2.standardizer.any_degenerate());
    for tt in 0..t {
        let col = t + tt;
        assert_eq!(design2.standardizer.scales[col], 0.0);
        assert!(design2.x.column(col).iter().all(|&v| v == 0.0));
    }
}

#[test]
fn fit_score_decode_and_draws_round_trip() {
    let config = small_config(53);
    let calibration = generate_session(&config).unwrap();
    let test = generate_session(&SimConfig { seed: 54, ..config.clone() }).unwrap();
    let design = assemble_design(&calibration).unwrap();
    let basis = build_kl_basis(
        &time_grid(calibration.timepoints),
        &KernelParams::new(0.01, 20.0).unwrap(),
        0.99,
    )
    .unwrap();
    let sampler_config = RtgpConfig {
        iterations: 300,
        burn_in: 100,
        thin: 4,
        xi2: Xi2Schedule {
            warm_iters: 40,
            start: 1.0,
            end: 1e-3,
        },
        seed: 99,
        ..RtgpConfig::default()
    };
    let draws = run_chain(&design, &basis, &sampler_config).unwrap();
    assert_eq!(draws.n_draws, 50);

    let table = score_flashes(&draws, &test, &design.standardizer).unwrap();
    assert!(table.entries.iter().all(|e| (0.0..=1.0).contains(&e.score)));
    let truth: Vec<char> = config.text.chars().collect();
    let curve = accuracy_curve(&table, &truth, &config.layout).unwrap();
    assert_eq!(curve.len(), config.sequences);

    // persistence round trip
    let path = temp_path("draws.rtgp");
    save_draws(&draws, &path).unwrap();
    let loaded = load_draws(&path).unwrap();
    assert_eq!(loaded.n_draws, draws.n_draws);
    assert_eq!(loaded.channels, draws.channels);
    assert_eq!(loaded.pairs, draws.pairs);
    assert_eq!(loaded.basis.rank, draws.basis.rank);
    assert_eq!(loaded.config_echo, draws.config_echo);
    assert_eq!(loaded.beta_raw(), draws.beta_raw());
    assert_eq!(loaded.zeta_raw(), draws.zeta_raw());
    assert_eq!(loaded.indicator_raw(), draws.indicator_raw());
    // scoring from the reloaded draws is identical
    let table2 = score_flashes(&loaded, &test, &design.standardizer).unwrap();
    for (a, b) in table.entries.iter().zip(&table2.entries) {
        assert_eq!(a.score, b.score);
    }
    let _ = std::fs::remove_file(&path);
}

#[test]
fn all_zero_draws_score_half() {
    use sirtgp_core::sampler::{GibbsChain, PosteriorDraws};
    let config = small_config(57);
    let session = generate_session(&config).unwrap();
    let design = assemble_design(&session).unwrap();
    let basis = build_kl_basis(
        &time_grid(session.timepoints),
        &KernelParams::new(0.01, 20.0).unwrap(),
        0.99,
    )
    .unwrap();
    let sampler_config = RtgpConfig {
        iterations: 8,
        burn_in: 4,
        thin: 1,
        xi2: Xi2Schedule {
            warm_iters: 2,
            start: 1.0,
            end: 1e-3,
        },
        seed: 5,
        ..RtgpConfig::default()
    };
    // a fresh chain state has every indicator off and all coefficients zero
    let chain = GibbsChain::new(&design, &basis, &sampler_config).unwrap();
    let mut draws = PosteriorDraws::empty(
        design.channels,
        design.timepoints,
        design.q(),
        basis.clone(),
        &sampler_config,
        design.standardizer.clone(),
    );
    for _ in 0..3 {
        draws.push_state(chain.state());
    }
    let table = score_flashes(&draws, &session, &design.standardizer).unwrap();
    assert!(table.entries.iter().all(|e| e.score == 0.5));
    // scores are invariant to draw order: the mean is symmetric, so three
    // identical frames give the same score as one
    let mut single = PosteriorDraws::empty(
        design.channels,
        design.timepoints,
        design.q(),
        basis.clone(),
        &sampler_config,
        design.standardizer.clone(),
    );
    single.push_state(chain.state());
    let table1 = score_flashes(&single, &session, &design.standardizer).unwrap();
    for (a, b) in table.entries.iter().zip(&table1.entries) {
        assert_eq!(a.score, b.score);
    }
}

#[test]
fn smoothness_estimate_recovers_generating_value() {
    // channel averages that are exact kernel draws with tiny noise; the
    // coarse grid {1, 5, 25} must pick 5 for most seeds
    let t_len = 60;
    let grid = time_grid(t_len);
    let params = KernelParams::new(0.01, 5.0).unwrap();
    let mut gram = gram_matrix(&grid, &params);
    for i in 0..t_len {
        gram[(i, i)] += 1e-8;
    }
    let chol = Cholesky::new(gram).unwrap();
    let layout = SpellerLayout::default_6x6();
    let mut hits = 0;
    let seeds = 6u64;
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let k_ch = 2usize;
        let mut waves = Vec::new();
        for _ in 0..k_ch {
            let z = nalgebra::DVector::from_fn(t_len, |_, _| {
                sirtgp_core::stats::standard_normal(&mut rng)
            });
            let path = chol.l() * z;
            waves.push(path);
        }
        // one character, one sequence, 12 flashes all equal to the wave
        let mut flashes = Vec::new();
        for j in 1..=12u16 {
            let mut signal = DMatrix::<f32>::zeros(k_ch, t_len);
            for k in 0..k_ch {
                for tt in 0..t_len {
                    let noise = 1e-3 * sirtgp_core::stats::standard_normal(&mut rng);
                    signal[(k, tt)] = (waves[k][tt] + noise) as f32;
                }
            }
            let label = j == 1 || j == 7;
            flashes.push(FlashRecord::new(1, 1, j, Some(label), signal));
        }
        let session = SessionData::new(
            k_ch,
            t_len,
            512.0,
            125.0,
            62.5,
            layout.clone(),
            vec!["A".into(), "B".into()],
            flashes,
        )
        .unwrap();
        let rho = estimate_rho(&session, 0.01, &[1.0, 5.0, 25.0]).unwrap();
        if (rho - 5.0).abs() < 1e-9 {
            hits += 1;
        }
    }
    assert!(hits * 2 > seeds, "recovered 5.0 in {hits}/{seeds} seeds");
}

#[test]
fn per_channel_estimates_average() {
    // two channels engineered to pick different grid points; the session
    // estimate is their arithmetic mean
    let t_len = 60;
    let grid = time_grid(t_len);
    let layout = SpellerLayout::default_6x6();
    let rng = ChaCha8Rng::seed_from_u64(7);
    let make_path = |rho: f64, rng: &mut ChaCha8Rng| {
        let params = KernelParams::new(0.01, rho).unwrap();
        let mut gram = gram_matrix(&grid, &params);
        for i in 0..t_len {
            gram[(i, i)] += 1e-8;
        }
        let chol = Cholesky::new(gram).unwrap();
        let z =
            nalgebra::DVector::from_fn(t_len, |_, _| sirtgp_core::stats::standard_normal(rng));
        chol.l() * z
    };
    let rho_grid = [2.0, 8.0];
    'seeds: for attempt in 0..10u64 {
        let mut rng_local = ChaCha8Rng::seed_from_u64(700 + attempt);
        let smooth = make_path(2.0, &mut rng_local);
        let wiggly = make_path(8.0, &mut rng_local);
        let mut flashes = Vec::new();
        for j in 1..=12u16 {
            let mut signal = DMatrix::<f32>::zeros(2, t_len);
            for tt in 0..t_len {
                signal[(0, tt)] = smooth[tt] as f32;
                signal[(1, tt)] = wiggly[tt] as f32;
            }
            flashes.push(FlashRecord::new(1, 1, j, Some(j == 1 || j == 7), signal));
        }
        let session = SessionData::new(
            2,
            t_len,
            512.0,
            125.0,
            62.5,
            layout.clone(),
            vec!["A".into(), "B".into()],
            flashes,
        )
        .unwrap();
        let per = per_channel_rho(&session, 0.01, &rho_grid).unwrap();
        if per == vec![Some(2.0), Some(8.0)] {
            let mean = estimate_rho(&session, 0.01, &rho_grid).unwrap();
            assert!((mean - 5.0).abs() < 1e-9);
            return;
        }
        if attempt == 9 {
            break 'seeds;
        }
    }
    let _ = rng; // at least one seed must separate the two channels
    panic!("no seed produced the (2, 8) argmax pair");
}

#[test]
fn flat_channels_are_excluded_or_fatal() {
    let t_len = 30;
    let layout = SpellerLayout::default_6x6();
    let mut flashes = Vec::new();
    for j in 1..=12u16 {
        let mut signal = DMatrix::<f32>::zeros(2, t_len);
        for tt in 0..t_len {
            signal[(0, tt)] = (tt as f32 * 0.3).sin();
            signal[(1, tt)] = 2.0; // flat
        }
        flashes.push(FlashRecord::new(1, 1, j, Some(j == 1 || j == 7), signal));
    }
    let session = SessionData::new(
        2,
        t_len,
        512.0,
        125.0,
        62.5,
        layout.clone(),
        vec!["A".into(), "B".into()],
        flashes.clone(),
    )
    .unwrap();
    let per = per_channel_rho(&session, 0.01, &[1.0, 10.0]).unwrap();
    assert!(per[0].is_some());
    assert!(per[1].is_none());
    assert!(estimate_rho(&session, 0.01, &[1.0, 10.0]).is_ok());

    // all channels flat: estimation error
    let mut all_flat = Vec::new();
    for j in 1..=12u16 {
        let signal = DMatrix::<f32>::from_element(2, t_len, 1.0);
        all_flat.push(FlashRecord::new(1, 1, j, Some(j == 1 || j == 7), signal));
    }
    let session = SessionData::new(
        2,
        t_len,
        512.0,
        125.0,
        62.5,
        layout,
        vec!["A".into(), "B".into()],
        all_flat,
    )
    .unwrap();
    assert!(estimate_rho(&session, 0.01, &[1.0, 10.0]).is_err());
}

#[test]
fn unlabeled_sessions_refuse_design_assembly() {
    let mut session = generate_session(&small_config(61)).unwrap();
    for f in &mut session.flashes {
        f.label = None;
    }
    assert!(!session.is_labeled());
    assert!(assemble_design(&session).is_err());
}
