//! Regime-specific circular-linear law.
//!
//! Speed `Y ~ Poisson(lambda_y)` is split by the threshold indicator
//! `W = I(Y >= 2)` into a Bernoulli part on `{0, 1}` and a truncated
//! Poisson on `{2, 3, ...}`; the product of the two collapses back to the
//! Poisson. Direction is the calm marker with hurdle probability
//! `nu * I(y = 0)`, otherwise an IWP draw on the grid with its winding
//! number kept as an augmentation variable.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::circular::{
    iwp_augmented_logpmf, iwp_sample_augmented, residue_log_pmf, DiscreteCircle, GridPoint, IwpParams,
    WindingConfig,
};
use crate::error::{Error, Result};
use crate::sampling::{ln_poisson, open_unit, poisson};

pub const DEFAULT_SPEED_CAP: f64 = 50.0;

/// Emission parameters `psi_r` of one regime.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegimeParams {
    pub lambda_y: f64,
    pub iwp: IwpParams,
    pub nu: f64,
}

impl RegimeParams {
    pub fn new(lambda_y: f64, iwp: IwpParams, nu: f64) -> Result<Self> {
        if !(lambda_y >= 0.0) || !lambda_y.is_finite() {
            return Err(Error::Domain(format!("speed rate must be finite and >= 0, got {lambda_y}")));
        }
        if !(0.0..=1.0).contains(&nu) {
            return Err(Error::Domain(format!("hurdle weight must lie in [0, 1], got {nu}")));
        }
        Ok(Self { lambda_y, iwp, nu })
    }
}

/// A complete direction value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    Grid(GridPoint),
    /// The calm marker: the instrument could not record a direction.
    Calm,
}

/// Direction as recorded, where instrument malfunction leaves a gap.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RecordedDirection {
    Grid(GridPoint),
    Calm,
    Missing,
}

impl From<Direction> for RecordedDirection {
    fn from(d: Direction) -> Self {
        match d {
            Direction::Grid(p) => RecordedDirection::Grid(p),
            Direction::Calm => RecordedDirection::Calm,
        }
    }
}

/// What a recorded speed tells us about the true speed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpeedInfo {
    /// `y* >= 2`: the true speed is `y*`.
    Exact(u32),
    /// `y* in {0, 1}`: only `y in {0, 1}` is known.
    Low,
    Missing,
}

/// One timestep's recording.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObservationCell {
    pub y_star: Option<u32>,
    pub x: RecordedDirection,
}

impl ObservationCell {
    pub fn new(y_star: Option<u32>, x: RecordedDirection) -> Result<Self> {
        if let (Some(y), RecordedDirection::Calm) = (y_star, x) {
            if y >= 2 {
                return Err(Error::Domain(format!(
                    "calm marker recorded together with speed {y} >= 2"
                )));
            }
        }
        Ok(Self { y_star, x })
    }

    pub fn missing() -> Self {
        Self {
            y_star: None,
            x: RecordedDirection::Missing,
        }
    }

    pub fn speed_info(&self) -> SpeedInfo {
        match self.y_star {
            Some(y) if y >= 2 => SpeedInfo::Exact(y),
            Some(_) => SpeedInfo::Low,
            None => SpeedInfo::Missing,
        }
    }
}

/// Per-timestep latent variables: true speed, threshold indicator,
/// complete direction and winding number (absent for the calm marker).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentCell {
    pub y: u32,
    pub w: bool,
    pub x: Direction,
    pub k: Option<u32>,
}

impl LatentCell {
    pub fn check(&self, k_max: u32) -> Result<()> {
        if self.w != (self.y >= 2) {
            return Err(Error::Domain(format!("w = {} inconsistent with y = {}", self.w, self.y)));
        }
        match (self.x, self.k) {
            (Direction::Calm, None) if self.y == 0 => Ok(()),
            (Direction::Calm, None) => Err(Error::Domain(format!("calm marker with speed {}", self.y))),
            (Direction::Grid(_), Some(k)) if k <= k_max => Ok(()),
            (x, k) => Err(Error::Domain(format!("direction {x:?} with winding {k:?}"))),
        }
    }

    /// The recording an instrument would produce, before any censoring of
    /// low speeds.
    pub fn recorded(&self) -> ObservationCell {
        ObservationCell {
            y_star: Some(self.y),
            x: self.x.into(),
        }
    }
}

/// `P(Y >= 2) = 1 - e^{-lambda}(1 + lambda)`.
pub fn w_success_prob(lambda_y: f64) -> f64 {
    if lambda_y <= 0.0 {
        return 0.0;
    }
    let p = if lambda_y < 1.0 {
        // direct series avoids cancellation for small rates
        let mut term = lambda_y * lambda_y / 2.0;
        let mut sum = 0.0;
        let mut n = 2.0;
        while term > sum * 1e-17 {
            sum += term;
            n += 1.0;
            term *= lambda_y / n;
        }
        (-lambda_y).exp() * sum
    } else {
        1.0 - (-lambda_y).exp() * (1.0 + lambda_y)
    };
    p.clamp(0.0, 1.0)
}

fn check_consistent(y: u32, w: bool) -> Result<()> {
    if w != (y >= 2) {
        return Err(Error::Domain(format!("speed {y} is inconsistent with w = {}", w as u8)));
    }
    Ok(())
}

/// `log P(y | w, lambda_y)`.
pub fn linear_logpmf(y: u32, w: bool, lambda_y: f64) -> Result<f64> {
    check_consistent(y, w)?;
    Ok(if w {
        ln_poisson(y as u64, lambda_y) - w_success_prob(lambda_y).ln()
    } else if y == 1 {
        // lambda e^-lambda / (e^-lambda (1 + lambda))
        lambda_y.ln() - lambda_y.ln_1p()
    } else {
        -lambda_y.ln_1p()
    })
}

/// `log P(w) + log P(y | w)`, which equals `log Poisson(y; lambda_y)`.
pub fn joint_yw_logpmf(y: u32, w: bool, lambda_y: f64) -> Result<f64> {
    let conditional = linear_logpmf(y, w, lambda_y)?;
    let ln_w = if w {
        w_success_prob(lambda_y).ln()
    } else {
        -lambda_y + lambda_y.ln_1p()
    };
    Ok(ln_w + conditional)
}

/// Hurdle probability `nu* = nu I(y = 0)`.
pub fn hurdle_prob(y: u32, nu: f64) -> f64 {
    if y == 0 {
        nu
    } else {
        0.0
    }
}

/// Augmented log-density of `(x, k, y, w)` under one regime.
pub fn obs_loglik(
    x: Direction,
    k: Option<u32>,
    y: u32,
    w: bool,
    psi: &RegimeParams,
    circle: &DiscreteCircle,
) -> Result<f64> {
    let linear = joint_yw_logpmf(y, w, psi.lambda_y)?;
    let nu_star = hurdle_prob(y, psi.nu);
    match (x, k) {
        (Direction::Calm, None) => {
            if y != 0 {
                return Err(Error::Domain(format!("calm marker has probability zero at speed {y}")));
            }
            Ok(linear + nu_star.ln())
        }
        (Direction::Grid(p), Some(k)) => {
            Ok(linear + (-nu_star).ln_1p() + iwp_augmented_logpmf(p, k, &psi.iwp, circle))
        }
        (x, k) => Err(Error::Domain(format!("direction {x:?} with winding {k:?}"))),
    }
}

/// Forward simulation of one `(x, k, y, w)` draw.
pub fn sample_observation<R: Rng + ?Sized>(
    psi: &RegimeParams,
    circle: &DiscreteCircle,
    cfg: &WindingConfig,
    rng: &mut R,
) -> LatentCell {
    let y = poisson(psi.lambda_y, rng) as u32;
    let calm = y == 0 && rng.random::<f64>() < psi.nu;
    let (x, k) = if calm {
        (Direction::Calm, None)
    } else {
        let (p, k) = iwp_sample_augmented(&psi.iwp, circle, cfg, rng);
        (Direction::Grid(p), Some(k))
    };
    LatentCell { y, w: y >= 2, x, k }
}

/// Per-regime quantities reused across every timestep of a sweep.
#[derive(Debug, Clone)]
pub struct EmissionTable {
    pub psi: RegimeParams,
    /// Truncated log IWP pmf of each grid point.
    pub ln_direction: Vec<f64>,
    ln_lambda: f64,
    ln_nu: f64,
    ln_one_minus_nu: f64,
}

impl EmissionTable {
    pub fn new(psi: &RegimeParams, circle: &DiscreteCircle, cfg: &WindingConfig) -> Self {
        let residues = residue_log_pmf(psi.iwp.lambda, circle, cfg);
        let ln_direction = circle
            .iter()
            .map(|x| residues[crate::circular::residue(x, psi.iwp.eta, psi.iwp.xi, circle)])
            .collect();
        Self {
            psi: *psi,
            ln_direction,
            ln_lambda: psi.lambda_y.ln(),
            ln_nu: psi.nu.ln(),
            ln_one_minus_nu: (-psi.nu).ln_1p(),
        }
    }

    /// `log P(recording | psi)` with every latent variable summed out.
    pub fn marginal_loglik(&self, obs: &ObservationCell) -> f64 {
        let lambda = self.psi.lambda_y;
        let nu = self.psi.nu;
        match (obs.speed_info(), obs.x) {
            (SpeedInfo::Exact(y), x) => {
                let linear = if lambda == 0.0 {
                    f64::NEG_INFINITY
                } else {
                    y as f64 * self.ln_lambda - lambda - crate::sampling::ln_factorial(y as u64)
                };
                match x {
                    RecordedDirection::Grid(p) => linear + self.ln_direction[p.0],
                    RecordedDirection::Calm => f64::NEG_INFINITY,
                    RecordedDirection::Missing => linear,
                }
            }
            // y in {0, 1}: P0 = e^-lambda, P1 = lambda e^-lambda
            (SpeedInfo::Low, RecordedDirection::Grid(p)) => {
                -lambda + ((1.0 - nu) + lambda).ln() + self.ln_direction[p.0]
            }
            (SpeedInfo::Low, RecordedDirection::Calm) | (SpeedInfo::Missing, RecordedDirection::Calm) => {
                -lambda + self.ln_nu
            }
            (SpeedInfo::Low, RecordedDirection::Missing) => -lambda + lambda.ln_1p(),
            (SpeedInfo::Missing, RecordedDirection::Grid(p)) => {
                (-(-lambda).exp() * nu).ln_1p() + self.ln_direction[p.0]
            }
            (SpeedInfo::Missing, RecordedDirection::Missing) => 0.0,
        }
    }

    pub fn ln_nu(&self) -> f64 {
        self.ln_nu
    }

    pub fn ln_one_minus_nu(&self) -> f64 {
        self.ln_one_minus_nu
    }
}

/// Zero-truncated Poisson draw by sequential inversion.
pub(crate) fn positive_poisson<R: Rng + ?Sized>(lambda: f64, rng: &mut R) -> u32 {
    if lambda > 1.0 {
        loop {
            let y = poisson(lambda, rng);
            if y > 0 {
                return y as u32;
            }
        }
    }
    // P(y | y > 0) = e^-lambda lambda^y / y! / (1 - e^-lambda)
    let norm = -(-lambda).exp_m1();
    let mut u = open_unit(rng) * norm;
    let mut y = 1u32;
    let mut p = (-lambda).exp() * lambda;
    loop {
        if u <= p || p == 0.0 {
            return y;
        }
        u -= p;
        y += 1;
        p *= lambda / y as f64;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::circular::{Orientation, DEFAULT_LAMBDA_MAX};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn circle() -> DiscreteCircle {
        DiscreteCircle::default()
    }

    fn cfg() -> WindingConfig {
        WindingConfig::new(DEFAULT_LAMBDA_MAX, &circle()).unwrap()
    }

    fn regime(lambda_y: f64, lambda_x: f64, eta: i64, xi: usize, nu: f64) -> RegimeParams {
        let iwp = IwpParams::new(lambda_x, Orientation::from_sign(eta).unwrap(), GridPoint(xi), &circle()).unwrap();
        RegimeParams::new(lambda_y, iwp, nu).unwrap()
    }

    /// Eq.-level form of `P(y | w = 0)` without the `lambda / (1 + lambda)`
    /// simplification.
    fn unsimplified_low_pmf(y: u32, lambda: f64) -> f64 {
        let s = lambda * (-lambda).exp() / ((-lambda).exp() * (1.0 + lambda));
        s.powi(y as i32) * (1.0 - s).powi(1 - y as i32)
    }

    #[test]
    fn w_success_examples() {
        assert_eq!(w_success_prob(0.0), 0.0);
        assert!((w_success_prob(1.0) - 0.264241).abs() < 1e-6);
        let mut prev = 0.0;
        for i in 1..400 {
            let p = w_success_prob(i as f64 * 0.1);
            assert!(p >= prev && p <= 1.0);
            prev = p;
        }
        assert!(w_success_prob(1e-4) > 0.0);
        let small: f64 = 1e-3;
        let exact = small * small / 2.0 - small.powi(3) / 3.0 + small.powi(4) / 8.0;
        assert!((w_success_prob(small) / exact - 1.0).abs() < 1e-9);
    }

    #[test]
    fn linear_examples() {
        assert!((linear_logpmf(1, false, 1.0).unwrap() - 0.5f64.ln()).abs() < 1e-15);
        let e = (-1.0f64).exp();
        let expected = ((e / 2.0) / (1.0 - 2.0 * e)).ln();
        assert!((linear_logpmf(2, true, 1.0).unwrap() - expected).abs() < 1e-14);
        assert!((0.69611 - expected.exp()).abs() < 1e-5);
        for &lambda in &[0.3, 1.0, 7.5] {
            for y in 0..2 {
                let got = linear_logpmf(y, false, lambda).unwrap().exp();
                assert!((got - unsimplified_low_pmf(y, lambda)).abs() < 1e-14);
            }
            let total: f64 = (2..400).map(|y| linear_logpmf(y, true, lambda).unwrap().exp()).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
        assert!(matches!(linear_logpmf(3, false, 1.0), Err(Error::Domain(_))));
        assert!(matches!(linear_logpmf(1, true, 1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn joint_collapses_to_poisson() {
        assert!((joint_yw_logpmf(0, false, 1.0).unwrap() + 1.0).abs() < 1e-15);
        assert!((joint_yw_logpmf(1, false, 1.0).unwrap() + 1.0).abs() < 1e-15);
        let p3 = ln_poisson(3, 1.0);
        assert!((joint_yw_logpmf(3, true, 1.0).unwrap() - p3).abs() < 1e-14);
    }

    #[test]
    fn hurdle_examples() {
        assert_eq!(hurdle_prob(0, 0.1), 0.1);
        assert_eq!(hurdle_prob(3, 0.1), 0.0);
        assert_eq!(hurdle_prob(0, 0.0), 0.0);
    }

    #[test]
    fn obs_loglik_examples() {
        let c = circle();
        let psi = regime(1.0, 5.0, 1, 0, 0.1);
        let got = obs_loglik(Direction::Calm, None, 0, false, &psi, &c).unwrap();
        assert!((got - ((-1.0f64).exp() * 0.1).ln()).abs() < 1e-14);

        let degenerate = regime(0.0, 0.0, 1, 0, 0.0);
        let got = obs_loglik(Direction::Grid(GridPoint(0)), Some(0), 0, false, &degenerate, &c).unwrap();
        assert_eq!(got, 0.0);

        assert!(obs_loglik(Direction::Calm, None, 1, false, &psi, &c).is_err());
        assert!(obs_loglik(Direction::Grid(GridPoint(0)), None, 1, false, &psi, &c).is_err());
    }

    #[test]
    fn zero_speed_total_probability() {
        // summing the augmented density over k and x in D + calm at y = 0
        let c = circle();
        let cfg = cfg();
        for psi in [regime(1.0, 5.0, -1, 5, 0.1), regime(3.0, 200.0, 1, 17, 0.6)] {
            let mut total = obs_loglik(Direction::Calm, None, 0, false, &psi, &c).unwrap().exp();
            for x in c.iter() {
                for k in 0..=cfg.k_max {
                    total += obs_loglik(Direction::Grid(x), Some(k), 0, false, &psi, &c).unwrap().exp();
                }
            }
            assert!((total - (-psi.lambda_y).exp()).abs() < 1e-12);
        }
    }

    #[test]
    fn full_normalization() {
        let c = circle();
        let cfg = cfg();
        for &lambda_y in &[0.1, 1.0, 5.0, 30.0] {
            let psi = regime(lambda_y, 12.0, -1, 3, 0.25);
            let mut total = 0.0;
            for y in 0..=200u32 {
                let w = y >= 2;
                if y == 0 {
                    total += obs_loglik(Direction::Calm, None, y, w, &psi, &c).unwrap().exp();
                }
                for x in c.iter() {
                    for k in 0..=cfg.k_max {
                        total += obs_loglik(Direction::Grid(x), Some(k), y, w, &psi, &c).unwrap().exp();
                    }
                }
            }
            assert!((total - 1.0).abs() < 1e-6, "lambda_y = {lambda_y}: {total}");
        }
    }

    #[test]
    fn marginal_loglik_sums_augmented_density() {
        let c = circle();
        let cfg = cfg();
        let psi = regime(1.3, 8.0, -1, 30, 0.2);
        let table = EmissionTable::new(&psi, &c, &cfg);
        let direct = |y: u32, x: Direction| -> f64 {
            match x {
                Direction::Calm => obs_loglik(x, None, y, y >= 2, &psi, &c).map(f64::exp).unwrap_or(0.0),
                Direction::Grid(_) => (0..=cfg.k_max)
                    .map(|k| obs_loglik(x, Some(k), y, y >= 2, &psi, &c).unwrap().exp())
                    .sum(),
            }
        };
        let all_x: Vec<Direction> = std::iter::once(Direction::Calm)
            .chain(c.iter().map(Direction::Grid))
            .collect();
        let cases = [
            (Some(4), RecordedDirection::Grid(GridPoint(2))),
            (Some(4), RecordedDirection::Missing),
            (Some(0), RecordedDirection::Grid(GridPoint(29))),
            (Some(1), RecordedDirection::Calm),
            (Some(1), RecordedDirection::Missing),
            (None, RecordedDirection::Grid(GridPoint(29))),
            (None, RecordedDirection::Calm),
            (None, RecordedDirection::Missing),
        ];
        for (y_star, x_rec) in cases {
            let obs = ObservationCell::new(y_star, x_rec).unwrap();
            let ys: Vec<u32> = match obs.speed_info() {
                SpeedInfo::Exact(y) => vec![y],
                SpeedInfo::Low => vec![0, 1],
                SpeedInfo::Missing => (0..120).collect(),
            };
            let xs: Vec<Direction> = match x_rec {
                RecordedDirection::Grid(p) => vec![Direction::Grid(p)],
                RecordedDirection::Calm => vec![Direction::Calm],
                RecordedDirection::Missing => all_x.clone(),
            };
            let brute: f64 = ys.iter().flat_map(|&y| xs.iter().map(move |&x| (y, x))).map(|(y, x)| direct(y, x)).sum();
            let got = table.marginal_loglik(&obs).exp();
            assert!((got - brute).abs() < 1e-12 * brute.max(1.0), "{y_star:?} {x_rec:?}: {got} vs {brute}");
        }
    }

    #[test]
    fn calm_with_high_speed_is_rejected() {
        assert!(ObservationCell::new(Some(3), RecordedDirection::Calm).is_err());
        assert!(ObservationCell::new(Some(1), RecordedDirection::Calm).is_ok());
    }

    #[test]
    fn sample_observation_examples() {
        let c = circle();
        let cfg = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let still = regime(0.0, 3.0, 1, 0, 1.0);
        for _ in 0..100 {
            let cell = sample_observation(&still, &c, &cfg, &mut rng);
            assert_eq!(cell, LatentCell { y: 0, w: false, x: Direction::Calm, k: None });
        }

        let psi = regime(1.0, 5.0, -1, 5, 0.1);
        let n = 1_000_000;
        let calm = (0..n)
            .filter(|_| sample_observation(&psi, &c, &cfg, &mut rng).x == Direction::Calm)
            .count();
        let p = 0.1 * (-1.0f64).exp();
        let se = (p * (1.0 - p) / n as f64).sqrt();
        assert!((calm as f64 / n as f64 - p).abs() < 3.0 * se);

        let a: Vec<_> = (0..20).map(|_| sample_observation(&psi, &c, &cfg, &mut ChaCha8Rng::seed_from_u64(4))).collect();
        let b: Vec<_> = (0..20).map(|_| sample_observation(&psi, &c, &cfg, &mut ChaCha8Rng::seed_from_u64(4))).collect();
        assert_eq!(a, b);
        for cell in a {
            cell.check(cfg.k_max).unwrap();
        }
    }

    #[test]
    fn positive_poisson_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for &lambda in &[0.05, 0.7, 3.0] {
            let n = 100_000;
            let mean = (0..n).map(|_| positive_poisson(lambda, &mut rng) as f64).sum::<f64>() / n as f64;
            let exact = lambda / -(-lambda as f64).exp_m1();
            assert!((mean - exact).abs() < 0.02 * exact, "{lambda}: {mean} vs {exact}");
        }
    }
}
