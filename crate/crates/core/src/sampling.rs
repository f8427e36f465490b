//! Random variates and log-space helpers shared by the samplers.
//!
//! Gamma and Dirichlet draws are carried out on the log scale so that
//! concentration parameters many orders of magnitude below one (tiny stick
//! remainders, for instance) never collapse a whole vector to zeros.

use rand::Rng;
use rand_distr::{Distribution, Gamma, Poisson};
use std::sync::OnceLock;

use statrs::function::gamma::gamma_lr;

const LN_FACTORIAL_CACHE: usize = 4096;

/// `ln m!`, tabulated for small `m`.
pub fn ln_factorial(m: u64) -> f64 {
    static TABLE: OnceLock<Vec<f64>> = OnceLock::new();
    let table = TABLE.get_or_init(|| {
        let mut t = Vec::with_capacity(LN_FACTORIAL_CACHE);
        t.push(0.0);
        for i in 1..LN_FACTORIAL_CACHE {
            t.push(statrs::function::factorial::ln_factorial(i as u64));
        }
        t
    });
    match table.get(m as usize) {
        Some(&v) => v,
        None => statrs::function::factorial::ln_factorial(m),
    }
}

/// log Poisson(m; lambda), with the `lambda = 0` point mass handled exactly.
pub fn ln_poisson(m: u64, lambda: f64) -> f64 {
    if lambda == 0.0 {
        if m == 0 {
            0.0
        } else {
            f64::NEG_INFINITY
        }
    } else {
        m as f64 * lambda.ln() - lambda - ln_factorial(m)
    }
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY || max.is_nan() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Uniform on (0, 1].
pub(crate) fn open_unit<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    1.0 - rng.random::<f64>()
}

/// Logarithm of a Gamma(shape, 1) variate.
pub fn ln_gamma_variate<R: Rng + ?Sized>(shape: f64, rng: &mut R) -> f64 {
    debug_assert!(shape > 0.0);
    if shape >= 1.0 {
        Gamma::new(shape, 1.0).unwrap().sample(rng).ln()
    } else {
        // G(a) = G(a + 1) * U^(1/a)
        let g = Gamma::new(shape + 1.0, 1.0).unwrap().sample(rng);
        g.ln() + open_unit(rng).ln() / shape
    }
}

/// Gamma variate in the shape/rate parameterization.
pub fn gamma<R: Rng + ?Sized>(shape: f64, rate: f64, rng: &mut R) -> f64 {
    ln_gamma_variate(shape, rng).exp() / rate
}

pub fn beta<R: Rng + ?Sized>(a: f64, b: f64, rng: &mut R) -> f64 {
    let la = ln_gamma_variate(a, rng);
    let lb = ln_gamma_variate(b, rng);
    // a / (a + b) computed as a logistic of the log ratio
    1.0 / (1.0 + (lb - la).exp())
}

/// Dirichlet draw. Zero entries of `alpha` receive exactly zero mass.
pub fn dirichlet<R: Rng + ?Sized>(alpha: &[f64], rng: &mut R) -> Vec<f64> {
    let logs: Vec<f64> = alpha
        .iter()
        .map(|&a| {
            if a > 0.0 {
                ln_gamma_variate(a, rng)
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect();
    let norm = log_sum_exp(&logs);
    logs.iter().map(|l| (l - norm).exp()).collect()
}

pub fn poisson<R: Rng + ?Sized>(lambda: f64, rng: &mut R) -> u64 {
    if lambda <= 0.0 {
        return 0;
    }
    Poisson::new(lambda).unwrap().sample(rng) as u64
}

/// Draw an index with probability proportional to `exp(log_weights)`.
/// Returns `None` when every weight is zero.
pub fn categorical_log<R: Rng + ?Sized>(log_weights: &[f64], rng: &mut R) -> Option<usize> {
    let max = log_weights
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return None;
    }
    let weights: Vec<f64> = log_weights.iter().map(|l| (l - max).exp()).collect();
    categorical(&weights, rng)
}

/// Draw an index with probability proportional to `weights`.
pub fn categorical<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> Option<usize> {
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return None;
    }
    let mut target = rng.random::<f64>() * total;
    let mut last = None;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            if target < w {
                return Some(i);
            }
            target -= w;
            last = Some(i);
        }
    }
    last
}

/// Gamma(shape, rate) restricted to (0, upper).
///
/// Plain rejection when the interval holds a sizeable share of the mass,
/// inverse-CDF on the restricted gamma otherwise, and a tangent-envelope
/// rejection sampler when the interval mass underflows.
pub fn truncated_gamma<R: Rng + ?Sized>(shape: f64, rate: f64, upper: f64, rng: &mut R) -> f64 {
    debug_assert!(shape > 0.0 && rate > 0.0 && upper > 0.0);
    let t_upper = rate * upper;
    let mass = gamma_lr(shape, t_upper);
    if mass >= 0.3 {
        let dist = Gamma::new(shape, 1.0 / rate).unwrap();
        loop {
            let x = dist.sample(rng);
            if x < upper {
                return x;
            }
        }
    }
    if mass > 1e-280 {
        let target = rng.random::<f64>() * mass;
        let t = invert_lower_gamma(shape, target, t_upper);
        return (t / rate).min(upper * (1.0 - f64::EPSILON));
    }
    if shape < 1.0 {
        // density is x^(a-1) on (0, upper) up to a factor within e^-(rate*upper) of one
        return upper * open_unit(rng).powf(1.0 / shape);
    }
    // log f(x) = (a - 1) ln x - b x is concave and increasing on (0, upper)
    let slope = (shape - 1.0) / upper - rate;
    let log_f = |x: f64| (shape - 1.0) * x.ln() - rate * x;
    let log_f_upper = log_f(upper);
    loop {
        let x = upper - Distribution::<f64>::sample(&rand_distr::Exp1, rng) / slope;
        if x <= 0.0 {
            continue;
        }
        let log_accept = log_f(x) - log_f_upper - slope * (x - upper);
        if open_unit(rng).ln() <= log_accept {
            return x;
        }
    }
}

/// Solve P(shape, t) = target for t in (0, t_upper) by safeguarded Newton.
fn invert_lower_gamma(shape: f64, target: f64, t_upper: f64) -> f64 {
    let ln_norm = statrs::function::gamma::ln_gamma(shape);
    let (mut lo, mut hi) = (0.0_f64, t_upper);
    // small-t expansion P(a, t) ~ t^a / Gamma(a + 1) gives a good start
    let mut t = ((target.ln() + statrs::function::gamma::ln_gamma(shape + 1.0)) / shape).exp();
    if !(t > lo && t < hi) {
        t = 0.5 * (lo + hi);
    }
    for _ in 0..200 {
        let f = gamma_lr(shape, t) - target;
        if f > 0.0 {
            hi = t;
        } else {
            lo = t;
        }
        let density = ((shape - 1.0) * t.ln() - t - ln_norm).exp();
        let mut next = if density > 0.0 { t - f / density } else { f64::NAN };
        if !(next > lo && next < hi) {
            next = if lo > 0.0 { (lo * hi).sqrt() } else { 0.5 * hi };
        }
        if (next - t).abs() <= 1e-14 * t || hi - lo <= 1e-15 * hi {
            return next;
        }
        t = next;
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ln_poisson_point_mass() {
        assert_eq!(ln_poisson(0, 0.0), 0.0);
        assert_eq!(ln_poisson(3, 0.0), f64::NEG_INFINITY);
        assert!((ln_poisson(0, 1.0) + 1.0).abs() < 1e-15);
    }

    #[test]
    fn dirichlet_survives_tiny_concentrations() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let d = dirichlet(&[1e-12, 1e-14, 1e-13], &mut rng);
            let s: f64 = d.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        let d = dirichlet(&[0.0, 2.0], &mut rng);
        assert_eq!(d[0], 0.0);
        assert!((d[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn truncated_gamma_respects_bound_in_every_regime() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        // large interval mass, small interval mass, underflowing mass
        for &(a, b, c) in &[(3.0, 1.0, 50.0), (1.0, 5e-5, 50.0), (5000.0, 1.0, 100.0), (0.5, 2.0, 1e-3)] {
            for _ in 0..500 {
                let x = truncated_gamma(a, b, c, &mut rng);
                assert!(x > 0.0 && x < c, "a={a} b={b} c={c} x={x}");
            }
        }
    }

    #[test]
    fn truncated_gamma_prior_is_nearly_uniform() {
        // Gamma(1, 5e-5) restricted to (0, 50) is within 0.25% of uniform
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 40_000;
        let mean: f64 = (0..n).map(|_| truncated_gamma(1.0, 5e-5, 50.0, &mut rng)).sum::<f64>() / n as f64;
        let se = 50.0 / 12f64.sqrt() / (n as f64).sqrt();
        assert!((mean - 25.0).abs() < 4.0 * se + 0.1, "mean {mean}");
    }

    #[test]
    fn truncated_gamma_inverse_cdf_matches_conditional_mean() {
        // Gamma(2, 1) on (0, 0.5): E = (2 - ...) computed by quadrature
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (a, c) = (2.0, 0.5);
        let grid = 20_000;
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..grid {
            let x = (i as f64 + 0.5) * c / grid as f64;
            let f = x.powf(a - 1.0) * (-x).exp();
            num += x * f;
            den += f;
        }
        let exact = num / den;
        let n = 50_000;
        let mean: f64 = (0..n).map(|_| truncated_gamma(a, 1.0, c, &mut rng)).sum::<f64>() / n as f64;
        assert!((mean - exact).abs() < 0.003, "{mean} vs {exact}");
    }

    #[test]
    fn categorical_skips_zero_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            assert_eq!(categorical_log(&[f64::NEG_INFINITY, 0.0, f64::NEG_INFINITY], &mut rng), Some(1));
        }
        assert_eq!(categorical_log(&[f64::NEG_INFINITY; 3], &mut rng), None);
    }
}
