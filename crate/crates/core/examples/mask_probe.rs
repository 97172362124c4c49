//! Diagnostic: watch the threshold, field magnitudes, and indicator counts
//! evolve over a SIRTGP-P chain on the baseline simulation.

use sirtgp_core::grid::mix_seed;
use sirtgp_core::sampler::{GibbsChain, PosteriorDraws, ThresholdTarget};
use sirtgp_core::{
    assemble_design, build_kl_basis, estimate_rho, generate_session, time_grid, KernelParams,
    RtgpConfig, SimConfig,
};

fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    sorted[lo]
}

fn main() {
    let sigma_e2: f64 = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(10.0);
    let use_si: bool = std::env::args()
        .nth(2)
        .map(|s| s == "si")
        .unwrap_or(true);
    let base = SimConfig {
        seed: mix_seed(42, &[0, 0, 0]),
        ..SimConfig::default()
    };
    let calib = generate_session(&base).unwrap();
    let design = assemble_design(&calib).unwrap();
    let rho = estimate_rho(&calib, 0.01, &sirtgp_core::kernel::default_rho_grid()).unwrap();
    println!("rho = {rho:.2}");
    let basis = build_kl_basis(
        &time_grid(calib.timepoints),
        &KernelParams::new(0.01, rho).unwrap(),
        0.99,
    )
    .unwrap();
    println!("rank L = {}, lambda1 = {:.2}", basis.rank, basis.lambdas[0]);
    let config = RtgpConfig {
        use_interactions: use_si,
        sigma_e2,
        seed: 7,
        ..RtgpConfig::default()
    };
    let mut chain = GibbsChain::new(&design, &basis, &config).unwrap();
    let mut draws = PosteriorDraws::empty(6, 50, design.q(), basis.clone(), &config, design.standardizer.clone());
    for it in 1..=config.iterations {
        chain.step().unwrap();
        if it > config.burn_in && (it - config.burn_in) % config.thin == 0 {
            draws.push_state(chain.state());
        }
        if it % 250 == 0 {
            let st = chain.state();
            let mut mags: Vec<f64> = st.relaxed_field.iter().map(|v| v.abs()).collect();
            mags.sort_by(f64::total_cmp);
            let active_sig: usize = (0..4)
                .flat_map(|k| (0..50).map(move |t| (k, t)))
                .filter(|&(k, t)| st.field_active[k * 50 + t])
                .count();
            let active_null: usize = (4..6)
                .flat_map(|k| (0..50).map(move |t| (k, t)))
                .filter(|&(k, t)| st.field_active[k * 50 + t])
                .count();
            println!(
                "it {it:4} xi2 {:.1e} om1 {:.2} om2 {:.2} |E~| q25 {:.2} q50 {:.2} q90 {:.2} max {:.2} act sig {active_sig}/200 null {active_null}/100 sig_eta2 {:.3}",
                st.xi2,
                st.omega1,
                st.omega2,
                quantile(&mags, 0.25),
                quantile(&mags, 0.50),
                quantile(&mags, 0.90),
                mags.last().unwrap(),
                st.sigma_eta2,
            );
        }
    }
    // threshold weights at the end
    let st = chain.state();
    let mut mags: Vec<f64> = st.relaxed_field.iter().map(|v| v.abs()).collect();
    mags.sort_by(f64::total_cmp);
    let qa = quantile(&mags, 0.25);
    let qb = quantile(&mags, 0.90);
    let grid: Vec<f64> = (0..10).map(|i| qa + (qb - qa) * i as f64 / 9.0).collect();
    let w = chain.threshold_log_weights(&grid, ThresholdTarget::Field);
    let m = w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let rel: Vec<String> = w.iter().map(|&x| format!("{:.1}", x - m)).collect();
    println!("omega1 grid {grid:?}");
    println!("log-weights (rel) {rel:?}");
    let (incl, _) = draws.posterior_inclusion();
    for k in 0..6 {
        let over: Vec<String> = (0..50)
            .step_by(5)
            .map(|t| format!("{:.1}", incl[(k, t)]))
            .collect();
        println!("incl ch{} {:?}", k + 1, over);
    }
}
