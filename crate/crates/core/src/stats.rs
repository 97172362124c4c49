//! Shared statistical primitives: normal CDF helpers with log-safe tails,
//! rejection-free truncated-normal sampling, and Polya-Gamma draws.

use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use statrs::function::erf;

use std::f64::consts::{FRAC_1_SQRT_2, PI};

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erf::erfc(-x * FRAC_1_SQRT_2)
}

/// Standard normal quantile function.
pub fn normal_quantile(p: f64) -> f64 {
    -std::f64::consts::SQRT_2 * erf::erfc_inv(2.0 * p)
}

/// log of the standard normal CDF, accurate into the far lower tail.
///
/// Uses `erfc` while it stays normal and switches to the asymptotic
/// expansion ln Phi(x) ~ -x^2/2 - ln(-x) - ln sqrt(2 pi) below -36.
pub fn ln_normal_cdf(x: f64) -> f64 {
    if x > -36.0 {
        let v = 0.5 * erf::erfc(-x * FRAC_1_SQRT_2);
        if v > 0.0 {
            return v.ln();
        }
    }
    let z = -x; // large positive
    let zi2 = 1.0 / (z * z);
    let series = (-zi2 * (1.0 - 3.0 * zi2 * (1.0 - 5.0 * zi2))).ln_1p();
    -0.5 * z * z - z.ln() - 0.5 * (2.0 * PI).ln() + series
}

/// log(exp(a) + exp(b)) without overflow.
pub fn log_sum_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Standard normal draw.
pub fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// Bounds (in standard deviations) beyond which the plain inverse-CDF draw
/// loses resolution and the Rayleigh tail form takes over.
const TAIL_CUTOFF: f64 = 6.0;

/// Draw from N(mean, sd^2) restricted to [lo, hi] by inverse CDF.
///
/// Rejection-free; intervals further than [`TAIL_CUTOFF`] standard deviations
/// out use the Rayleigh tail law, whose quantile error is negligible there.
pub fn trunc_normal<R: Rng>(rng: &mut R, mean: f64, sd: f64, lo: f64, hi: f64) -> f64 {
    debug_assert!(sd > 0.0 && lo < hi);
    let a = (lo - mean) / sd;
    let b = (hi - mean) / sd;
    mean + sd * std_trunc_normal(rng, a, b)
}

fn std_trunc_normal<R: Rng>(rng: &mut R, a: f64, b: f64) -> f64 {
    if a > 0.0 {
        return -std_trunc_lower(rng, -b, -a);
    }
    std_trunc_lower(rng, a, b)
}

// a <= 0 here, so only the lower tail can be extreme.
fn std_trunc_lower<R: Rng>(rng: &mut R, a: f64, b: f64) -> f64 {
    if b <= -TAIL_CUTOFF {
        return -rayleigh_tail(rng, -b, -a);
    }
    let pa = normal_cdf(a);
    let pb = normal_cdf(b);
    let u: f64 = rng.gen();
    let p = (pa + u * (pb - pa)).clamp(f64::MIN_POSITIVE, 1.0 - 1e-16);
    normal_quantile(p).clamp(a, b)
}

// x in [a, b] with a >= TAIL_CUTOFF, density proportional to x exp(-x^2/2).
fn rayleigh_tail<R: Rng>(rng: &mut R, a: f64, b: f64) -> f64 {
    let w = if b.is_finite() {
        -(-(b * b - a * a) / 2.0).exp_m1()
    } else {
        1.0
    };
    let u: f64 = rng.gen();
    let x = (a * a - 2.0 * (-(u * w)).ln_1p()).sqrt();
    x.clamp(a, b.min(f64::MAX))
}

/// Draw from N(mean, sd^2) restricted to { u : |u| > omega }.
///
/// The tail is picked from the exact log-masses, then sampled one-sided.
pub fn trunc_normal_outside<R: Rng>(rng: &mut R, mean: f64, sd: f64, omega: f64) -> f64 {
    if omega <= 0.0 {
        return mean + sd * standard_normal(rng);
    }
    let ln_up = ln_normal_cdf((mean - omega) / sd);
    let ln_lo = ln_normal_cdf((-omega - mean) / sd);
    let p_up = 1.0 / (1.0 + (ln_lo - ln_up).exp());
    if rng.gen::<f64>() < p_up {
        trunc_normal(rng, mean, sd, omega, f64::INFINITY)
    } else {
        trunc_normal(rng, mean, sd, f64::NEG_INFINITY, -omega)
    }
}

/// (ln P(|u| > omega), ln P(|u| <= omega)) for u ~ N(mean, sd^2).
pub fn ln_two_region_masses(mean: f64, sd: f64, omega: f64) -> (f64, f64) {
    if omega <= 0.0 {
        return (0.0, f64::NEG_INFINITY);
    }
    let ln_up = ln_normal_cdf((mean - omega) / sd);
    let ln_lo = ln_normal_cdf((-omega - mean) / sd);
    let ln_out = log_sum_exp(ln_up, ln_lo);
    // inner interval, symmetric in the sign of the mean
    let m = mean.abs();
    let t_hi = (omega - m) / sd;
    let t_lo = (-omega - m) / sd;
    let ln_in = if t_hi >= 0.0 {
        (normal_cdf(t_hi) - normal_cdf(t_lo))
            .max(f64::MIN_POSITIVE)
            .ln()
    } else {
        let l_hi = ln_normal_cdf(t_hi);
        let l_lo = ln_normal_cdf(t_lo);
        l_hi + (-((l_lo - l_hi).exp())).ln_1p()
    };
    (ln_out, ln_in)
}

// ---------------------------------------------------------------------------
// Polya-Gamma PG(1, z) via Devroye's alternating-series method
// ---------------------------------------------------------------------------

const PG_TRUNC: f64 = 0.64;
const PG_TRUNC_RECIP: f64 = 1.0 / PG_TRUNC;

/// Draw from PG(1, z). Mean is tanh(z/2) / (2 z), so PG(1, 0) has mean 1/4.
pub fn polya_gamma<R: Rng>(rng: &mut R, z: f64) -> f64 {
    0.25 * jacobi_star(rng, z.abs() * 0.5)
}

// Tilted Jacobi J*(1, z) sampler with proposal split at PG_TRUNC.
fn jacobi_star<R: Rng>(rng: &mut R, z: f64) -> f64 {
    let fz = 0.125 * PI * PI + 0.5 * z * z;
    let p_exp = mass_texpon(z, fz);
    loop {
        let x = if rng.gen::<f64>() < p_exp {
            let e: f64 = Exp1.sample(rng);
            PG_TRUNC + e / fz
        } else {
            tilted_inverse_gaussian(rng, z)
        };
        let mut s = pg_coef(0, x);
        let y = rng.gen::<f64>() * s;
        let mut n = 0usize;
        loop {
            n += 1;
            if n % 2 == 1 {
                s -= pg_coef(n, x);
                if y <= s {
                    return x;
                }
            } else {
                s += pg_coef(n, x);
                if y > s {
                    break;
                }
            }
        }
    }
}

fn pg_coef(n: usize, x: f64) -> f64 {
    let k = (n as f64 + 0.5) * PI;
    if x > PG_TRUNC {
        k * (-0.5 * k * k * x).exp()
    } else if x > 0.0 {
        let half = n as f64 + 0.5;
        (-1.5 * ((0.5 * PI).ln() + x.ln()) + k.ln() - 2.0 * half * half / x).exp()
    } else {
        0.0
    }
}

// Probability that the proposal draws from the exponential tail.
fn mass_texpon(z: f64, fz: f64) -> f64 {
    let t = PG_TRUNC;
    let b = (1.0 / t).sqrt() * (t * z - 1.0);
    let a = -(1.0 / t).sqrt() * (t * z + 1.0);
    let x0 = fz.ln() + fz * t;
    let xb = x0 - z + ln_normal_cdf(b);
    let xa = x0 + z + ln_normal_cdf(a);
    let q_div_p = 4.0 / PI * (xb.exp() + xa.exp());
    1.0 / (1.0 + q_div_p)
}

// Inverse-Gaussian(1/z, 1) restricted to (0, PG_TRUNC).
fn tilted_inverse_gaussian<R: Rng>(rng: &mut R, z: f64) -> f64 {
    let t = PG_TRUNC;
    if z < PG_TRUNC_RECIP {
        // mean above the truncation point: one-sided stable proposal
        loop {
            let mut e1: f64 = Exp1.sample(rng);
            let mut e2: f64 = Exp1.sample(rng);
            while e1 * e1 > 2.0 * e2 / t {
                e1 = Exp1.sample(rng);
                e2 = Exp1.sample(rng);
            }
            let v = 1.0 + e1 * t;
            let x = t / (v * v);
            if rng.gen::<f64>() <= (-0.5 * z * z * x).exp() {
                return x;
            }
        }
    } else {
        let mu = 1.0 / z;
        loop {
            let y = {
                let n: f64 = StandardNormal.sample(rng);
                n * n
            };
            let mu_y = mu * y;
            let mut x = mu + 0.5 * mu * mu_y - 0.5 * mu * (4.0 * mu_y + mu_y * mu_y).sqrt();
            if rng.gen::<f64>() > mu / (mu + x) {
                x = mu * mu / x;
            }
            if x < t {
                return x;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn normal_cdf_matches_known_values() {
        assert!((normal_cdf(0.0) - 0.5).abs() < 1e-15);
        assert!((normal_cdf(1.6449) - 0.95).abs() < 1e-4);
        assert!((normal_quantile(0.975) - 1.959964).abs() < 1e-5);
    }

    #[test]
    fn ln_cdf_tracks_cdf_and_tail_expansion() {
        for &x in &[-5.0, -1.0, 0.0, 2.0, -20.0, -35.9] {
            let direct = normal_cdf(x).ln();
            assert!(
                (ln_normal_cdf(x) - direct).abs() < 1e-9 * direct.abs().max(1.0),
                "x={x}"
            );
        }
        // far tail: finite and decreasing
        let l50 = ln_normal_cdf(-50.0);
        let l60 = ln_normal_cdf(-60.0);
        assert!(l50.is_finite() && l60 < l50);
        // leading order is -x^2/2
        assert!((l50 / (-0.5 * 2500.0) - 1.0).abs() < 0.01);
    }

    #[test]
    fn trunc_normal_respects_bounds_and_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 100_000;
        let mut sum = 0.0;
        for _ in 0..n {
            let x = trunc_normal(&mut rng, 0.0, 1.0, 0.0, f64::INFINITY);
            assert!(x >= 0.0);
            sum += x;
        }
        let mean = sum / n as f64;
        let half_normal = (2.0 / PI).sqrt(); // 0.7978845608028654
        assert!(
            (mean - half_normal).abs() < 0.01,
            "half-normal mean {mean} vs {half_normal}"
        );
    }

    #[test]
    fn trunc_normal_far_tail_is_finite_and_ordered() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10_000 {
            let x = trunc_normal(&mut rng, 0.0, 1.0, 40.0, f64::INFINITY);
            assert!(x.is_finite() && x >= 40.0 && x < 42.0);
            let y = trunc_normal(&mut rng, 0.0, 0.01, f64::NEG_INFINITY, -0.5);
            assert!(y.is_finite() && y <= -0.5);
        }
    }

    #[test]
    fn two_region_masses_sum_to_one() {
        for &(m, s, w) in &[(0.0, 1.0, 0.5), (2.0, 0.3, 1.0), (-8.0, 0.01, 0.5), (0.2, 1e-2, 0.4)]
        {
            let (lo, li) = ln_two_region_masses(m, s, w);
            let total = lo.exp() + li.exp();
            assert!((total - 1.0).abs() < 1e-9, "m={m} s={s} w={w} total={total}");
        }
    }

    #[test]
    fn outside_draws_stay_outside() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20_000 {
            let x = trunc_normal_outside(&mut rng, 0.3, 0.7, 0.5);
            assert!(x.abs() > 0.5);
        }
    }

    #[test]
    fn polya_gamma_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let mean0: f64 = (0..n).map(|_| polya_gamma(&mut rng, 0.0)).sum::<f64>() / n as f64;
        assert!((mean0 - 0.25).abs() < 0.01, "PG(1,0) mean {mean0}");

        let z = 2.0_f64;
        let expect = (z / 2.0).tanh() / (2.0 * z);
        let mean2: f64 = (0..n).map(|_| polya_gamma(&mut rng, z)).sum::<f64>() / n as f64;
        assert!((mean2 - expect).abs() < 0.01, "PG(1,2) mean {mean2} vs {expect}");
    }
}
