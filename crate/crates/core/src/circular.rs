//! The discrete circle and the invariant wrapped Poisson (IWP) law on it.
//!
//! A direction is one of `l` equally spaced grid points. The IWP wraps
//! `eta * (Q * 2pi/l + xi)` with `Q ~ Poisson(lambda)` around the circle, so
//! the probability of grid point `x` is a sum over winding numbers `k` of
//! Poisson masses evaluated at the unwrapped index
//! `m = ((eta * x - xi) mod 2pi) * l / 2pi + k * l`.
//! The sum is truncated at `k_max`, which is fixed from `lambda_max`.

use std::f64::consts::TAU;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampling::{ln_poisson, log_sum_exp, poisson};

pub const DEFAULT_GRID_POINTS: usize = 36;
pub const DEFAULT_LAMBDA_MAX: f64 = 500.0;

const GRID_TOLERANCE: f64 = 1e-9;

/// The `l` equally spaced points `2 pi j / l`, `j = 0..l`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "usize", into = "usize")]
pub struct DiscreteCircle {
    points: usize,
}

/// Index `j` of the grid point `2 pi j / l`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GridPoint(pub usize);

impl DiscreteCircle {
    pub fn new(points: usize) -> Result<Self> {
        if points < 2 {
            return Err(Error::Config(format!(
                "a discrete circle needs at least 2 points, got {points}"
            )));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> usize {
        self.points
    }

    pub fn step(&self) -> f64 {
        TAU / self.points as f64
    }

    pub fn angle(&self, p: GridPoint) -> f64 {
        self.step() * p.0 as f64
    }

    pub fn iter(&self) -> impl Iterator<Item = GridPoint> {
        (0..self.points).map(GridPoint)
    }

    /// Map an angle (radians, any winding) to its grid point.
    pub fn grid_index(&self, angle: f64) -> Result<GridPoint> {
        let off_grid = || Error::OffGrid {
            angle,
            points: self.points,
        };
        if !angle.is_finite() {
            return Err(off_grid());
        }
        let reduced = angle.rem_euclid(TAU);
        let j = (reduced / self.step()).round();
        if (reduced - j * self.step()).abs() > GRID_TOLERANCE {
            return Err(off_grid());
        }
        Ok(GridPoint(j as usize % self.points))
    }

    /// Map an integer compass reading in degrees to its grid point.
    pub fn from_degrees(&self, degrees: i64) -> Result<GridPoint> {
        let l = self.points as i64;
        if (degrees * l).rem_euclid(360) != 0 {
            return Err(Error::OffGrid {
                angle: (degrees as f64).to_radians(),
                points: self.points,
            });
        }
        Ok(GridPoint(((degrees * l / 360).rem_euclid(l)) as usize))
    }

    pub fn degrees(&self, p: GridPoint) -> f64 {
        360.0 * p.0 as f64 / self.points as f64
    }
}

impl Default for DiscreteCircle {
    fn default() -> Self {
        Self {
            points: DEFAULT_GRID_POINTS,
        }
    }
}

impl TryFrom<usize> for DiscreteCircle {
    type Error = Error;
    fn try_from(points: usize) -> Result<Self> {
        Self::new(points)
    }
}

impl From<DiscreteCircle> for usize {
    fn from(c: DiscreteCircle) -> usize {
        c.points
    }
}

/// Orientation `eta` of the wrapped line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "i8", into = "i8")]
pub enum Orientation {
    Negative,
    Positive,
}

impl Orientation {
    pub const BOTH: [Orientation; 2] = [Orientation::Negative, Orientation::Positive];

    pub fn sign(self) -> i64 {
        match self {
            Orientation::Negative => -1,
            Orientation::Positive => 1,
        }
    }

    pub fn from_sign(sign: i64) -> Result<Self> {
        match sign {
            -1 => Ok(Orientation::Negative),
            1 => Ok(Orientation::Positive),
            other => Err(Error::Domain(format!("orientation must be -1 or 1, got {other}"))),
        }
    }
}

impl TryFrom<i8> for Orientation {
    type Error = Error;
    fn try_from(v: i8) -> Result<Self> {
        Self::from_sign(v as i64)
    }
}

impl From<Orientation> for i8 {
    fn from(o: Orientation) -> i8 {
        o.sign() as i8
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IwpParams {
    pub lambda: f64,
    pub eta: Orientation,
    pub xi: GridPoint,
}

impl IwpParams {
    pub fn new(lambda: f64, eta: Orientation, xi: GridPoint, circle: &DiscreteCircle) -> Result<Self> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::Domain(format!("IWP rate must be finite and >= 0, got {lambda}")));
        }
        if xi.0 >= circle.points() {
            return Err(Error::Domain(format!(
                "offset index {} outside a {}-point circle",
                xi.0,
                circle.points()
            )));
        }
        Ok(Self { lambda, eta, xi })
    }
}

/// Truncation of the winding number, fixed from the rate upper bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindingConfig {
    pub lambda_max: f64,
    pub k_max: u32,
}

impl WindingConfig {
    pub fn new(lambda_max: f64, circle: &DiscreteCircle) -> Result<Self> {
        Ok(Self {
            lambda_max,
            k_max: compute_k_max(lambda_max, circle)?,
        })
    }

    /// Number of winding numbers `0..=k_max`.
    pub fn windings(&self) -> usize {
        self.k_max as usize + 1
    }
}

/// `k_max = ceil(3 sqrt(lambda_max) / l + lambda_max / l - 1/2)`, floored at 0.
pub fn compute_k_max(lambda_max: f64, circle: &DiscreteCircle) -> Result<u32> {
    if !(lambda_max > 0.0) || !lambda_max.is_finite() {
        return Err(Error::Config(format!("lambda_max must be positive, got {lambda_max}")));
    }
    let l = circle.points() as f64;
    let k = (3.0 * lambda_max.sqrt() / l + lambda_max / l - 0.5).ceil();
    Ok(k.max(0.0) as u32)
}

pub fn grid_index(angle: f64, circle: &DiscreteCircle) -> Result<GridPoint> {
    circle.grid_index(angle)
}

/// `(eta * x - xi) mod l`, the winding-free part of the unwrapped index.
pub fn residue(x: GridPoint, eta: Orientation, xi: GridPoint, circle: &DiscreteCircle) -> usize {
    let l = circle.points() as i64;
    (eta.sign() * x.0 as i64 - xi.0 as i64).rem_euclid(l) as usize
}

/// The unwrapped Poisson index `m` of grid point `x` on winding `k`.
pub fn unwrapped_index(x: GridPoint, k: u32, p: &IwpParams, circle: &DiscreteCircle) -> u64 {
    residue(x, p.eta, p.xi, circle) as u64 + k as u64 * circle.points() as u64
}

/// Joint log-probability of `(x, k)`: the `k`-th summand of the wrapped sum.
pub fn iwp_augmented_logpmf(x: GridPoint, k: u32, p: &IwpParams, circle: &DiscreteCircle) -> f64 {
    ln_poisson(unwrapped_index(x, k, p, circle), p.lambda)
}

fn check_rate(p: &IwpParams, cfg: &WindingConfig) -> Result<()> {
    if p.lambda > cfg.lambda_max {
        return Err(Error::Config(format!(
            "IWP rate {} exceeds lambda_max {}",
            p.lambda, cfg.lambda_max
        )));
    }
    Ok(())
}

pub fn iwp_log_pmf(x: GridPoint, p: &IwpParams, circle: &DiscreteCircle, cfg: &WindingConfig) -> Result<f64> {
    check_rate(p, cfg)?;
    let terms: Vec<f64> = (0..=cfg.k_max)
        .map(|k| iwp_augmented_logpmf(x, k, p, circle))
        .collect();
    Ok(log_sum_exp(&terms))
}

/// Truncated IWP probability of grid point `x`.
pub fn iwp_pmf(x: GridPoint, p: &IwpParams, circle: &DiscreteCircle, cfg: &WindingConfig) -> Result<f64> {
    iwp_log_pmf(x, p, circle, cfg).map(f64::exp)
}

/// `log sum_k Poisson(r + k l; lambda)` for every residue `r` in `0..l`.
///
/// The pmf of any grid point under any `(eta, xi)` is an entry of this
/// table, indexed by [`residue`].
pub fn residue_log_pmf(lambda: f64, circle: &DiscreteCircle, cfg: &WindingConfig) -> Vec<f64> {
    let l = circle.points() as u64;
    let mut terms = Vec::with_capacity(cfg.windings());
    (0..l)
        .map(|r| {
            terms.clear();
            terms.extend((0..=cfg.k_max as u64).map(|k| ln_poisson(r + k * l, lambda)));
            log_sum_exp(&terms)
        })
        .collect()
}

/// Directional mean `(eta xi + lambda sin(eta 2pi/l)) mod 2pi`.
pub fn iwp_mean(p: &IwpParams, circle: &DiscreteCircle) -> f64 {
    let eta = p.eta.sign() as f64;
    (eta * circle.angle(p.xi) + p.lambda * (eta * circle.step()).sin()).rem_euclid(TAU)
}

/// Mean resultant length `exp(-lambda (1 - cos(2pi/l)))`.
pub fn iwp_concentration(p: &IwpParams, circle: &DiscreteCircle) -> f64 {
    (-p.lambda * (1.0 - circle.step().cos())).exp()
}

/// Draw `q ~ Poisson(lambda)` and wrap `eta (q 2pi/l + xi)` onto the grid.
pub fn iwp_sample<R: Rng + ?Sized>(p: &IwpParams, circle: &DiscreteCircle, rng: &mut R) -> GridPoint {
    let q = poisson(p.lambda, rng);
    wrap(q, p, circle)
}

fn wrap(q: u64, p: &IwpParams, circle: &DiscreteCircle) -> GridPoint {
    let l = circle.points() as i64;
    let unwrapped = (q % l as u64) as i64 + p.xi.0 as i64;
    GridPoint((p.eta.sign() * unwrapped).rem_euclid(l) as usize)
}

/// Draw `(x, k)` from the augmented law with winding numbers limited to
/// `0..=k_max` (draws beyond the truncation are rejected).
pub fn iwp_sample_augmented<R: Rng + ?Sized>(
    p: &IwpParams,
    circle: &DiscreteCircle,
    cfg: &WindingConfig,
    rng: &mut R,
) -> (GridPoint, u32) {
    let l = circle.points() as u64;
    let bound = l * cfg.windings() as u64;
    loop {
        let q = poisson(p.lambda, rng);
        if q < bound {
            return (wrap(q, p, circle), (q / l) as u32);
        }
    }
}
