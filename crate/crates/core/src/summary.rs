//! Posterior summaries and predictive densities from retained draws.
//!
//! Each draw is identified by sorting its occupied states by speed rate,
//! with ties broken by the IWP rate. Per-regime estimates use the draws
//! whose number of occupied states equals the posterior mode.

use std::collections::BTreeMap;
use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};

use crate::circular::{iwp_concentration, iwp_mean, residue, residue_log_pmf, DiscreteCircle, Orientation, WindingConfig};
use crate::error::{Error, Result};
use crate::gibbs::{Draw, RegimeDraw};

pub const DEFAULT_Y_PLOT_MAX: u32 = 50;

/// Posterior mean with an equal-tail 95% interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

impl Estimate {
    pub fn from_samples(values: &[f64]) -> Self {
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        Self {
            mean: values.iter().sum::<f64>() / values.len() as f64,
            lower: quantile(&sorted, 0.025),
            upper: quantile(&sorted, 0.975),
        }
    }

    /// Circular mean in `[0, 2pi)`; the interval is taken on the angles
    /// unwrapped to within `pi` of that mean, so it may leave `[0, 2pi)`.
    pub fn from_angles(angles: &[f64]) -> Self {
        let (s, c) = angles
            .iter()
            .fold((0.0, 0.0), |(s, c), a| (s + a.sin(), c + a.cos()));
        let centre = s.atan2(c).rem_euclid(TAU);
        let unwrapped: Vec<f64> = angles
            .iter()
            .map(|a| centre + (a - centre + PI).rem_euclid(TAU) - PI)
            .collect();
        let mut sorted = unwrapped;
        sorted.sort_by(f64::total_cmp);
        Self {
            mean: centre,
            lower: quantile(&sorted, 0.025),
            upper: quantile(&sorted, 0.975),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeSummary {
    pub lambda_y: Estimate,
    pub lambda_x: Estimate,
    pub nu: Estimate,
    /// Circular mean direction.
    pub mu: Estimate,
    /// Circular concentration.
    pub c: Estimate,
    /// Posterior probability of `eta = +1`.
    pub eta_positive: f64,
    /// Posterior pmf of the offset over grid indices.
    pub xi_pmf: Vec<f64>,
    /// Share of timesteps assigned to the regime.
    pub occupancy: Estimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSummary {
    pub draws: usize,
    /// Posterior pmf of the number of occupied regimes.
    pub r_pmf: BTreeMap<usize, f64>,
    pub modal_r: usize,
    /// Draws with `modal_r` occupied regimes, used below.
    pub conditioned_draws: usize,
    pub regimes: Vec<RegimeSummary>,
    /// Transition probabilities among the occupied regimes.
    pub transition: Vec<Vec<Estimate>>,
    pub rho: Estimate,
    pub gamma: Estimate,
    pub tau: Estimate,
}

/// Occupied states of a draw in reporting order, as `(index, regime)`.
pub fn relabel(draw: &Draw) -> Vec<(usize, RegimeDraw)> {
    let mut occupied: Vec<(usize, RegimeDraw)> = draw
        .regimes
        .iter()
        .copied()
        .enumerate()
        .filter(|(_, r)| r.count > 0)
        .collect();
    occupied.sort_by(|a, b| {
        a.1.lambda_y
            .total_cmp(&b.1.lambda_y)
            .then(a.1.lambda_x.total_cmp(&b.1.lambda_x))
    });
    occupied
}

fn r_pmf(draws: &[Draw]) -> (BTreeMap<usize, f64>, usize) {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for d in draws {
        *counts.entry(relabel(d).len()).or_default() += 1;
    }
    // ties go to the smaller count
    let modal = counts
        .iter()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
        .map(|(&r, _)| r)
        .unwrap_or(0);
    let n = draws.len() as f64;
    (counts.into_iter().map(|(r, c)| (r, c as f64 / n)).collect(), modal)
}

pub fn summarize(draws: &[Draw], circle: &DiscreteCircle) -> Result<PosteriorSummary> {
    if draws.is_empty() {
        return Err(Error::Config("no draws to summarize".into()));
    }
    let (pmf, modal_r) = r_pmf(draws);
    let kept: Vec<(&Draw, Vec<(usize, RegimeDraw)>)> = draws
        .iter()
        .map(|d| (d, relabel(d)))
        .filter(|(_, r)| r.len() == modal_r)
        .collect();
    let l = circle.points();
    let regimes = (0..modal_r)
        .map(|r| {
            let pick = |f: &dyn Fn(&Draw, &RegimeDraw) -> f64| -> Vec<f64> {
                kept.iter().map(|(d, reg)| f(d, &reg[r].1)).collect()
            };
            let mut xi_pmf = vec![0.0; l];
            let mut positive = 0.0;
            for (_, reg) in &kept {
                xi_pmf[reg[r].1.xi.0] += 1.0;
                if reg[r].1.eta == Orientation::Positive {
                    positive += 1.0;
                }
            }
            let n = kept.len() as f64;
            xi_pmf.iter_mut().for_each(|v| *v /= n);
            RegimeSummary {
                lambda_y: Estimate::from_samples(&pick(&|_, g| g.lambda_y)),
                lambda_x: Estimate::from_samples(&pick(&|_, g| g.lambda_x)),
                nu: Estimate::from_samples(&pick(&|_, g| g.nu)),
                mu: Estimate::from_angles(&pick(&|_, g| iwp_mean(&g.params().iwp, circle))),
                c: Estimate::from_samples(&pick(&|_, g| iwp_concentration(&g.params().iwp, circle))),
                eta_positive: positive / n,
                xi_pmf,
                occupancy: Estimate::from_samples(&pick(&|d, g| {
                    g.count as f64 / d.regimes.iter().map(|x| x.count).sum::<usize>() as f64
                })),
            }
        })
        .collect();
    let transition = (0..modal_r)
        .map(|i| {
            (0..modal_r)
                .map(|j| {
                    let v: Vec<f64> = kept
                        .iter()
                        .map(|(d, reg)| d.transition[reg[i].0][reg[j].0])
                        .collect();
                    Estimate::from_samples(&v)
                })
                .collect()
        })
        .collect();
    let all = |f: fn(&Draw) -> f64| Estimate::from_samples(&draws.iter().map(f).collect::<Vec<_>>());
    Ok(PosteriorSummary {
        draws: draws.len(),
        r_pmf: pmf,
        modal_r,
        conditioned_draws: kept.len(),
        regimes,
        transition,
        rho: all(|d| d.rho),
        gamma: all(|d| d.gamma),
        tau: all(|d| d.tau),
    })
}

/// Posterior predictive law of one regime.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeDensity {
    /// Probability of the calm marker.
    pub calm: f64,
    /// Probability of each grid point.
    pub circular: Vec<f64>,
    /// Probability of each speed `0..=y_max`.
    pub linear: Vec<f64>,
}

/// Direction pmf of one draw's regime over the calm marker and the grid.
/// The truncated IWP is renormalized.
fn circular_pmf(g: &RegimeDraw, circle: &DiscreteCircle, cfg: &WindingConfig) -> (f64, Vec<f64>) {
    let table = residue_log_pmf(g.lambda_x, circle, cfg);
    let raw: Vec<f64> = circle
        .iter()
        .map(|x| table[residue(x, g.eta, g.xi, circle)].exp())
        .collect();
    let total: f64 = raw.iter().sum();
    let calm = (-g.lambda_y).exp() * g.nu;
    (calm, raw.iter().map(|p| (1.0 - calm) * p / total).collect())
}

/// Monte Carlo average of the per-draw predictive laws of each regime,
/// over the draws with the modal number of occupied regimes.
pub fn predictive_density(
    draws: &[Draw],
    circle: &DiscreteCircle,
    cfg: &WindingConfig,
    y_max: u32,
) -> Result<Vec<RegimeDensity>> {
    if draws.is_empty() {
        return Err(Error::Config("no draws for predictive densities".into()));
    }
    let (_, modal_r) = r_pmf(draws);
    let mut out = vec![
        RegimeDensity {
            calm: 0.0,
            circular: vec![0.0; circle.points()],
            linear: vec![0.0; y_max as usize + 1],
        };
        modal_r
    ];
    let mut n = 0.0;
    for d in draws {
        let reg = relabel(d);
        if reg.len() != modal_r {
            continue;
        }
        n += 1.0;
        for (acc, (_, g)) in out.iter_mut().zip(&reg) {
            let (calm, circ) = circular_pmf(g, circle, cfg);
            acc.calm += calm;
            acc.circular.iter_mut().zip(&circ).for_each(|(a, p)| *a += p);
            for (y, a) in acc.linear.iter_mut().enumerate() {
                *a += crate::sampling::ln_poisson(y as u64, g.lambda_y).exp();
            }
        }
    }
    for acc in &mut out {
        acc.calm /= n;
        acc.circular.iter_mut().for_each(|a| *a /= n);
        acc.linear.iter_mut().for_each(|a| *a /= n);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::circular::GridPoint;

    fn regime(lambda_y: f64, lambda_x: f64, xi: usize, nu: f64, count: usize) -> RegimeDraw {
        RegimeDraw {
            lambda_y,
            lambda_x,
            eta: Orientation::Positive,
            xi: GridPoint(xi),
            nu,
            count,
        }
    }

    fn draw(regimes: Vec<RegimeDraw>) -> Draw {
        let k = regimes.len();
        let transition = (0..k)
            .map(|i| {
                let mut row: Vec<f64> = (0..k).map(|j| if i == j { 0.7 } else { 0.3 / k as f64 }).collect();
                row.push(1.0 - row.iter().sum::<f64>());
                row
            })
            .collect();
        Draw {
            iter: 1,
            occupied: regimes.iter().filter(|r| r.count > 0).count(),
            rho: 0.5,
            gamma: 2.0,
            tau: 1.0,
            beta: vec![1.0 / (k + 1) as f64; k + 1],
            regimes,
            transition,
        }
    }

    #[test]
    fn single_draw_is_degenerate() {
        let c = DiscreteCircle::default();
        let d = draw(vec![regime(10.0, 93.374, 0, 0.1, 5), regime(1.0, 5.0, 3, 0.0, 5)]);
        let s = summarize(&[d], &c).unwrap();
        assert_eq!(s.modal_r, 2);
        let first = &s.regimes[0];
        assert_eq!(first.lambda_y, Estimate { mean: 1.0, lower: 1.0, upper: 1.0 });
        let c2 = &s.regimes[1].c;
        assert!((c2.mean - 0.242).abs() < 1e-3);
        assert_eq!(c2.lower, c2.upper);
        assert_eq!(s.transition[0][0].mean, 0.7);
    }

    #[test]
    fn empty_stream_is_an_error() {
        assert!(summarize(&[], &DiscreteCircle::default()).is_err());
    }

    #[test]
    fn unoccupied_states_are_ignored() {
        let c = DiscreteCircle::default();
        let draws = vec![
            draw(vec![regime(0.1, 1.0, 0, 0.5, 0), regime(5.0, 1.0, 0, 0.5, 10)]),
            draw(vec![regime(5.2, 1.0, 0, 0.5, 10)]),
            draw(vec![regime(4.8, 1.0, 0, 0.5, 6), regime(9.0, 1.0, 0, 0.5, 4)]),
        ];
        let s = summarize(&draws, &c).unwrap();
        assert_eq!(s.modal_r, 1);
        assert_eq!(s.r_pmf[&1], 2.0 / 3.0);
        assert_eq!(s.conditioned_draws, 2);
        assert!((s.regimes[0].lambda_y.mean - 5.1).abs() < 1e-12);
    }

    #[test]
    fn angles_wrap_across_zero() {
        let e = Estimate::from_angles(&[0.1, TAU - 0.1, 0.05, TAU - 0.05]);
        assert!(e.mean < 1e-9 || (TAU - e.mean) < 1e-9);
        assert!(e.lower < 0.0 && e.upper > 0.0);
        assert!(e.upper - e.lower < 0.25);
    }

    #[test]
    fn point_mass_direction() {
        let c = DiscreteCircle::default();
        let w = WindingConfig::new(500.0, &c).unwrap();
        let dens = predictive_density(&[draw(vec![regime(3.0, 0.0, 7, 0.0, 1)])], &c, &w, 50).unwrap();
        assert_eq!(dens[0].calm, 0.0);
        assert_eq!(dens[0].circular[7], 1.0);
        assert_eq!(dens[0].circular.iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn averaged_pmfs_are_normalized() {
        let c = DiscreteCircle::default();
        let w = WindingConfig::new(500.0, &c).unwrap();
        let draws: Vec<Draw> = (0..20)
            .map(|i| draw(vec![regime(0.5 + i as f64 * 0.01, 480.0, i, 0.3, 3), regime(8.0, 2.0, 3, 0.0, 7)]))
            .collect();
        for d in predictive_density(&draws, &c, &w, 50).unwrap() {
            assert!((d.calm + d.circular.iter().sum::<f64>() - 1.0).abs() < 1e-8);
        }
    }
}
