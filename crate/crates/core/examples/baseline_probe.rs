//! Quick probe of the baseline simulation: accuracy of SIRTGP-P, RTGP-P,
//! and SWLDA over a few replicates, with timing. Run with --release.

use sirtgp_core::grid::{fit_method, mix_seed, model_support, score_session, KernelSettings, Method};
use sirtgp_core::swlda::SwldaConfig;
use sirtgp_core::{accuracy_curve, eswr, truth_support, RtgpConfig, SimConfig};
use std::time::Instant;

fn main() {
    let replicates: usize = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(3);
    let iters: usize = std::env::args()
        .nth(2)
        .and_then(|s| s.parse().ok())
        .unwrap_or(3000);
    let tau2: f64 = std::env::args()
        .nth(3)
        .and_then(|s| s.parse().ok())
        .unwrap_or(9.0);
    let amplitude: f64 = std::env::args()
        .nth(4)
        .and_then(|s| s.parse().ok())
        .unwrap_or(2.0);
    let sigma_e2: f64 = std::env::args()
        .nth(5)
        .and_then(|s| s.parse().ok())
        .unwrap_or(10.0);
    let width: f64 = std::env::args()
        .nth(6)
        .and_then(|s| s.parse().ok())
        .unwrap_or(0.08);
    let radius: f64 = std::env::args()
        .nth(7)
        .and_then(|s| s.parse().ok())
        .unwrap_or(3.0);
    let mut base = SimConfig {
        tau2,
        ..SimConfig::default()
    };
    base.template.amplitude = amplitude;
    base.template.width = width;
    base.template.support_radius = radius;
    let sampler = RtgpConfig {
        iterations: iters,
        burn_in: iters / 3,
        thin: 5,
        sigma_e2,
        ..RtgpConfig::default()
    };
    let sampler = RtgpConfig {
        thin: {
            let kept = sampler.iterations - sampler.burn_in;
            (1..=kept).rev().find(|t| kept % t == 0 && kept / t >= 100).unwrap_or(1)
        },
        ..sampler
    };
    let kernel = KernelSettings::default();
    let swlda = SwldaConfig::default();
    let methods = [Method::SirtgpProbit, Method::RtgpProbit, Method::Swlda];
    let mut sums = [0.0f64; 3];
    for rep in 0..replicates {
        let calib = sirtgp_core::generate_session(&SimConfig {
            seed: mix_seed(42, &[0, rep as u64, 0]),
            ..base.clone()
        })
        .unwrap();
        let test = sirtgp_core::generate_session(&SimConfig {
            seed: mix_seed(42, &[0, rep as u64, 1]),
            ..base.clone()
        })
        .unwrap();
        let truth: Vec<char> = base.text.chars().collect();
        let tmask = truth_support(&base);
        for (mi, &method) in methods.iter().enumerate() {
            let t0 = Instant::now();
            let fitted = fit_method(
                method,
                &calib,
                &sampler,
                &kernel,
                &swlda,
                mix_seed(42, &[0, rep as u64, 2, mi as u64]),
            )
            .unwrap();
            let table = score_session(&fitted, &test).unwrap();
            let curve = accuracy_curve(&table, &truth, &base.layout).unwrap();
            let acc = *curve.last().unwrap();
            sums[mi] += acc;
            let est = model_support(&fitted);
            let es: Vec<String> = (0..4)
                .map(|k| {
                    eswr(&est, &tmask, k)
                        .unwrap()
                        .map_or("--".into(), |v| format!("{v:.2}"))
                })
                .collect();
            let ee: Vec<String> = (0..6)
                .map(|k| {
                    sirtgp_core::eewr(&est, &tmask, k)
                        .unwrap()
                        .map_or("--".into(), |v| format!("{v:.2}"))
                })
                .collect();
            println!(
                "rep {rep} {:10} acc {:.3}  eswr {:?} eewr {:?} ({:.1}s)",
                method.name(),
                acc,
                es,
                ee,
                t0.elapsed().as_secs_f64()
            );
        }
    }
    for (mi, m) in methods.iter().enumerate() {
        println!("MEAN {:10} {:.3}", m.name(), sums[mi] / replicates as f64);
    }
}
