//! Full conditionals of the emission parameters and latent data, and the
//! sweep that ties them to the beam-sampled state path.
//!
//! One sweep runs, in order: slice thresholds and stick extension, a
//! forward-filter backward-sample of the path with every per-timestep
//! latent summed out, pruning of empty states, imputation of the latent
//! speed, threshold, direction and winding number, the emission updates of
//! each regime, relabeling by speed rate, and finally the auxiliary table
//! counts, `beta`, `(rho, gamma, tau)` and the transition rows.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::circular::{
    iwp_sample_augmented, residue, residue_log_pmf, unwrapped_index, DiscreteCircle, GridPoint, IwpParams,
    Orientation, WindingConfig, DEFAULT_LAMBDA_MAX,
};
use crate::emission::{
    positive_poisson, sample_observation, Direction, EmissionTable, LatentCell, ObservationCell, RecordedDirection,
    RegimeParams, SpeedInfo, DEFAULT_SPEED_CAP,
};
use crate::error::{Error, Result};
use crate::hdp::{
    beam_slice, extend_representation, ffbs_states, resample_beta, resample_hypers, sample_auxiliary_counts,
    sample_pi_row, HdpState, HyperPriors, LogLikMatrix, TransitionCounts, DEFAULT_MAX_EXTENSIONS,
};
use crate::sampling::{beta, categorical_log, ln_poisson, poisson, truncated_gamma};

/// Truncated gamma priors `G(a_y, b_y) I(0, c_y)` on the speed rate and
/// `G(a_x, b_x) I(0, lambda_max)` on the IWP rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmissionPriors {
    pub a_y: f64,
    pub b_y: f64,
    pub c_y: f64,
    pub a_x: f64,
    pub b_x: f64,
    pub lambda_max: f64,
}

impl Default for EmissionPriors {
    fn default() -> Self {
        Self {
            a_y: 1.0,
            b_y: 0.00005,
            c_y: DEFAULT_SPEED_CAP,
            a_x: 1.0,
            b_x: 0.00005,
            lambda_max: DEFAULT_LAMBDA_MAX,
        }
    }
}

impl EmissionPriors {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("a_y", self.a_y),
            ("b_y", self.b_y),
            ("c_y", self.c_y),
            ("a_x", self.a_x),
            ("b_x", self.b_x),
            ("lambda_max", self.lambda_max),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive and finite, got {v}")));
            }
        }
        Ok(())
    }

    /// Draw `psi` from the base measure.
    pub fn sample<R: Rng + ?Sized>(&self, circle: &DiscreteCircle, rng: &mut R) -> RegimeParams {
        let lambda_y = truncated_gamma(self.a_y, self.b_y, self.c_y, rng);
        let lambda_x = truncated_gamma(self.a_x, self.b_x, self.lambda_max, rng);
        let eta = Orientation::BOTH[rng.random_range(0..2)];
        let xi = GridPoint(rng.random_range(0..circle.points()));
        RegimeParams {
            lambda_y,
            iwp: IwpParams {
                lambda: lambda_x,
                eta,
                xi,
            },
            nu: rng.random::<f64>(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainConfig {
    pub n_iter: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
    pub priors: EmissionPriors,
    pub hyper: HyperPriors,
    pub circle: DiscreteCircle,
    /// States used to seed the path before the first sweep.
    pub init_states: usize,
    pub max_extensions: usize,
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self {
            n_iter: 100_000,
            burn_in: 50_000,
            thin: 10,
            seed: 0,
            priors: EmissionPriors::default(),
            hyper: HyperPriors::default(),
            circle: DiscreteCircle::default(),
            init_states: 5,
            max_extensions: DEFAULT_MAX_EXTENSIONS,
        }
    }
}

impl ChainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_iter == 0 || self.thin == 0 {
            return Err(Error::Config("n_iter and thin must be positive".into()));
        }
        if self.burn_in >= self.n_iter {
            return Err(Error::Config(format!(
                "burn_in ({}) must be smaller than n_iter ({})",
                self.burn_in, self.n_iter
            )));
        }
        if self.init_states == 0 {
            return Err(Error::Config("init_states must be positive".into()));
        }
        self.priors.validate()?;
        crate::hdp::GammaPrior::new(self.hyper.gamma.shape, self.hyper.gamma.rate)?;
        crate::hdp::GammaPrior::new(self.hyper.tau.shape, self.hyper.tau.rate)?;
        Ok(())
    }

    /// Number of draws [`run_chain`] retains.
    pub fn retained(&self) -> usize {
        (self.n_iter - self.burn_in) / self.thin
    }

    pub fn winding(&self) -> Result<WindingConfig> {
        WindingConfig::new(self.priors.lambda_max, &self.circle)
    }
}

/// Everything a sweep mutates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepState {
    pub cells: Vec<LatentCell>,
    pub z: Vec<usize>,
    pub z0: usize,
    pub hdp: HdpState,
    /// Emission parameters of each represented state.
    pub psi: Vec<RegimeParams>,
}

impl SweepState {
    pub fn check(&self, obs: &[ObservationCell], k_max: u32) -> Result<()> {
        let k = self.hdp.represented();
        if self.psi.len() != k || self.z0 >= k || self.z.iter().any(|&s| s >= k) {
            return Err(Error::Domain("state labels out of range".into()));
        }
        for (cell, o) in self.cells.iter().zip(obs) {
            cell.check(k_max)?;
            let consistent = match (o.speed_info(), o.x, cell.x) {
                (SpeedInfo::Exact(y), _, _) if y != cell.y => false,
                (SpeedInfo::Low, _, _) if cell.y > 1 => false,
                (_, RecordedDirection::Grid(p), Direction::Grid(q)) => p == q,
                (_, RecordedDirection::Grid(_), Direction::Calm) => false,
                (_, RecordedDirection::Calm, x) => x == Direction::Calm,
                _ => true,
            };
            if !consistent {
                return Err(Error::Domain(format!("latent cell {cell:?} contradicts recording {o:?}")));
            }
        }
        Ok(())
    }

    /// Number of distinct states visited by `z`.
    pub fn occupied(&self) -> usize {
        let mut seen = vec![false; self.hdp.represented()];
        self.z.iter().for_each(|&s| seen[s] = true);
        seen.iter().filter(|&&s| s).count()
    }
}

/// `lambda_y ~ G(a_y + sum y, b_y + n) I(0, c_y)`.
pub fn update_lambda_y<'a, R: Rng + ?Sized>(
    cells: impl IntoIterator<Item = &'a LatentCell>,
    priors: &EmissionPriors,
    rng: &mut R,
) -> f64 {
    let (sum, n) = cells
        .into_iter()
        .fold((0.0, 0.0), |(s, n), c| (s + c.y as f64, n + 1.0));
    truncated_gamma(priors.a_y + sum, priors.b_y + n, priors.c_y, rng)
}

/// `lambda_x ~ G(a_x + sum m_t, b_x + n') I(0, lambda_max)` over the
/// non-calm cells.
pub fn update_lambda_x<'a, R: Rng + ?Sized>(
    cells: impl IntoIterator<Item = &'a LatentCell>,
    iwp: &IwpParams,
    circle: &DiscreteCircle,
    priors: &EmissionPriors,
    rng: &mut R,
) -> f64 {
    let (mut sum, mut n) = (0.0, 0.0);
    for c in cells {
        if let (Direction::Grid(x), Some(k)) = (c.x, c.k) {
            sum += unwrapped_index(x, k, iwp, circle) as f64;
            n += 1.0;
        }
    }
    truncated_gamma(priors.a_x + sum, priors.b_x + n, priors.lambda_max, rng)
}

/// Winding number of grid point `x` given the IWP parameters.
pub fn update_k<R: Rng + ?Sized>(
    x: GridPoint,
    iwp: &IwpParams,
    circle: &DiscreteCircle,
    cfg: &WindingConfig,
    rng: &mut R,
) -> Result<u32> {
    let r = residue(x, iwp.eta, iwp.xi, circle) as u64;
    let l = circle.points() as u64;
    let weights: Vec<f64> = (0..=cfg.k_max as u64)
        .map(|k| ln_poisson(r + k * l, iwp.lambda))
        .collect();
    categorical_log(&weights, rng)
        .map(|k| k as u32)
        .ok_or_else(|| Error::Degenerate(format!("no winding number has mass at rate {}", iwp.lambda)))
}

/// Conditional law of the winding number for every residue under one IWP
/// rate, shared by all cells of a regime.
#[derive(Debug, Clone)]
pub struct WindingTable {
    windings: usize,
    cumulative: Vec<f64>,
}

impl WindingTable {
    pub fn new(lambda: f64, circle: &DiscreteCircle, cfg: &WindingConfig) -> Self {
        let windings = cfg.windings();
        let l = circle.points() as u64;
        let mut cumulative = Vec::with_capacity(l as usize * windings);
        let mut logs = vec![0.0; windings];
        for r in 0..l {
            for (k, v) in logs.iter_mut().enumerate() {
                *v = ln_poisson(r + k as u64 * l, lambda);
            }
            let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut acc = 0.0;
            for v in &logs {
                if max > f64::NEG_INFINITY {
                    acc += (v - max).exp();
                }
                cumulative.push(acc);
            }
        }
        Self { windings, cumulative }
    }

    pub fn sample<R: Rng + ?Sized>(&self, residue: usize, rng: &mut R) -> Result<u32> {
        let row = &self.cumulative[residue * self.windings..(residue + 1) * self.windings];
        let total = row[self.windings - 1];
        if !(total > 0.0) {
            return Err(Error::Degenerate(format!("no winding number has mass at residue {residue}")));
        }
        let target = rng.random::<f64>() * total;
        Ok(row.iter().position(|&c| target < c).unwrap_or(self.windings - 1) as u32)
    }
}

fn draw_eta_xi<R: Rng + ?Sized>(log_weights: &[f64], circle: &DiscreteCircle, rng: &mut R) -> Result<(Orientation, GridPoint)> {
    let l = circle.points();
    categorical_log(log_weights, rng)
        .map(|i| (Orientation::BOTH[i / l], GridPoint(i % l)))
        .ok_or_else(|| Error::Degenerate("every orientation and offset has zero mass".into()))
}

/// Joint draw of `(eta, xi)` over `{-1, +1} x D` with winding numbers held
/// fixed, under uniform priors.
pub fn update_eta_xi<'a, R: Rng + ?Sized>(
    cells: impl IntoIterator<Item = &'a LatentCell>,
    lambda_x: f64,
    circle: &DiscreteCircle,
    rng: &mut R,
) -> Result<(Orientation, GridPoint)> {
    let l = circle.points();
    let mut weights = vec![0.0; 2 * l];
    for c in cells {
        if let (Direction::Grid(x), Some(k)) = (c.x, c.k) {
            for (i, w) in weights.iter_mut().enumerate() {
                let m = residue(x, Orientation::BOTH[i / l], GridPoint(i % l), circle) as u64 + k as u64 * l as u64;
                *w += ln_poisson(m, lambda_x);
            }
        }
    }
    draw_eta_xi(&weights, circle, rng)
}

/// Joint draw of `(eta, xi)` with the winding numbers summed out.
pub fn update_eta_xi_collapsed<'a, R: Rng + ?Sized>(
    cells: impl IntoIterator<Item = &'a LatentCell>,
    lambda_x: f64,
    circle: &DiscreteCircle,
    cfg: &WindingConfig,
    rng: &mut R,
) -> Result<(Orientation, GridPoint)> {
    let l = circle.points();
    let mut counts = vec![0u32; l];
    for c in cells {
        if let Direction::Grid(x) = c.x {
            counts[x.0] += 1;
        }
    }
    let table = residue_log_pmf(lambda_x, circle, cfg);
    let weights: Vec<f64> = (0..2 * l)
        .map(|i| {
            let (eta, xi) = (Orientation::BOTH[i / l], GridPoint(i % l));
            counts
                .iter()
                .enumerate()
                .filter(|(_, &n)| n > 0)
                .map(|(x, &n)| n as f64 * table[residue(GridPoint(x), eta, xi, circle)])
                .sum()
        })
        .collect();
    draw_eta_xi(&weights, circle, rng)
}

/// `nu ~ Beta(1 + #calm, 1 + #{y = 0, x on the grid})`.
pub fn update_nu<'a, R: Rng + ?Sized>(cells: impl IntoIterator<Item = &'a LatentCell>, rng: &mut R) -> f64 {
    let (mut calm, mut open) = (0.0, 0.0);
    for c in cells {
        if c.y == 0 {
            match c.x {
                Direction::Calm => calm += 1.0,
                Direction::Grid(_) => open += 1.0,
            }
        }
    }
    beta(1.0 + calm, 1.0 + open, rng)
}

/// Draw the true speed and threshold indicator given the recording, with
/// an unrecorded direction summed out.
pub fn impute_y_w<R: Rng + ?Sized>(obs: &ObservationCell, psi: &RegimeParams, rng: &mut R) -> (u32, bool) {
    let lambda = psi.lambda_y;
    let y = match (obs.speed_info(), obs.x) {
        (SpeedInfo::Exact(y), _) => y,
        (_, RecordedDirection::Calm) => 0,
        (SpeedInfo::Low, x) => {
            // P(y = 0) carries the factor (1 - nu) when a direction was seen
            let zero = if x == RecordedDirection::Missing { 1.0 } else { 1.0 - psi.nu };
            (rng.random::<f64>() * (lambda + zero) < lambda) as u32
        }
        (SpeedInfo::Missing, RecordedDirection::Grid(_)) => {
            let p0 = (-lambda).exp();
            let zero = p0 * (1.0 - psi.nu);
            if rng.random::<f64>() * (1.0 - p0 * psi.nu) < zero {
                0
            } else {
                positive_poisson(lambda, rng)
            }
        }
        (SpeedInfo::Missing, RecordedDirection::Missing) => poisson(lambda, rng) as u32,
    };
    (y, y >= 2)
}

/// Draw an unrecorded direction and its winding number given the speed.
pub fn impute_x<R: Rng + ?Sized>(
    y: u32,
    psi: &RegimeParams,
    circle: &DiscreteCircle,
    cfg: &WindingConfig,
    rng: &mut R,
) -> (Direction, Option<u32>) {
    if y == 0 && rng.random::<f64>() < psi.nu {
        return (Direction::Calm, None);
    }
    let (x, k) = iwp_sample_augmented(&psi.iwp, circle, cfg, rng);
    (Direction::Grid(x), Some(k))
}

/// Exact joint draw of every latent of one timestep given its recording.
pub fn impute_cell<R: Rng + ?Sized>(
    obs: &ObservationCell,
    psi: &RegimeParams,
    circle: &DiscreteCircle,
    cfg: &WindingConfig,
    rng: &mut R,
) -> Result<LatentCell> {
    let table = WindingTable::new(psi.iwp.lambda, circle, cfg);
    impute_cell_with(obs, psi, &table, circle, cfg, rng)
}

fn impute_cell_with<R: Rng + ?Sized>(
    obs: &ObservationCell,
    psi: &RegimeParams,
    table: &WindingTable,
    circle: &DiscreteCircle,
    cfg: &WindingConfig,
    rng: &mut R,
) -> Result<LatentCell> {
    let (y, w) = impute_y_w(obs, psi, rng);
    let (x, k) = match obs.x {
        RecordedDirection::Calm => (Direction::Calm, None),
        RecordedDirection::Grid(p) => {
            let r = residue(p, psi.iwp.eta, psi.iwp.xi, circle);
            (Direction::Grid(p), Some(table.sample(r, rng)?))
        }
        RecordedDirection::Missing => impute_x(y, psi, circle, cfg, rng),
    };
    Ok(LatentCell { y, w, x, k })
}

/// One retained posterior sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Draw {
    pub iter: usize,
    /// Distinct states visited by the path.
    pub occupied: usize,
    pub rho: f64,
    pub gamma: f64,
    pub tau: f64,
    pub beta: Vec<f64>,
    pub regimes: Vec<RegimeDraw>,
    /// Rows over represented states, remainder last.
    pub transition: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegimeDraw {
    pub lambda_y: f64,
    pub lambda_x: f64,
    pub eta: Orientation,
    pub xi: GridPoint,
    pub nu: f64,
    /// Timesteps assigned to this state.
    pub count: usize,
}

impl RegimeDraw {
    pub fn params(&self) -> RegimeParams {
        RegimeParams {
            lambda_y: self.lambda_y,
            iwp: IwpParams {
                lambda: self.lambda_x,
                eta: self.eta,
                xi: self.xi,
            },
            nu: self.nu,
        }
    }
}

/// Draw `(hyperparameters, beta, pi, psi, z, latents)` of a length-`len`
/// sequence from the prior.
pub fn sample_prior_state<R: Rng + ?Sized>(len: usize, config: &ChainConfig, rng: &mut R) -> Result<SweepState> {
    let winding = config.winding()?;
    let rho = rng.random::<f64>();
    let gamma = crate::sampling::gamma(config.hyper.gamma.shape, config.hyper.gamma.rate, rng);
    let tau = crate::sampling::gamma(config.hyper.tau.shape, config.hyper.tau.rate, rng);
    let mut hdp = HdpState::from_prior(rho, gamma, tau, rng);
    let mut z = Vec::with_capacity(len);
    let mut prev = 0;
    for _ in 0..len {
        let (next, _) = hdp.sample_successor(prev, rng);
        z.push(next);
        prev = next;
    }
    let psi: Vec<RegimeParams> = (0..hdp.represented())
        .map(|_| config.priors.sample(&config.circle, rng))
        .collect();
    let cells = z
        .iter()
        .map(|&s| sample_observation(&psi[s], &config.circle, &winding, rng))
        .collect();
    Ok(SweepState {
        cells,
        z,
        z0: 0,
        hdp,
        psi,
    })
}

pub struct Sampler {
    config: ChainConfig,
    winding: WindingConfig,
    obs: Vec<ObservationCell>,
    state: SweepState,
    rng: ChaCha8Rng,
}

impl Sampler {
    /// Seed the chain from speed quantiles and moment estimates, then run
    /// the parameter half of a sweep.
    pub fn new(obs: Vec<ObservationCell>, config: ChainConfig) -> Result<Self> {
        config.validate()?;
        let winding = config.winding()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (z, psi) = initial_assignment(&obs, &config);
        let k = psi.len();
        let mut counts = vec![0.0; k];
        z.iter().for_each(|&s| counts[s] += 1.0);
        let total = obs.len() as f64 + k as f64 + 1.0;
        let mut beta: Vec<f64> = counts.iter().map(|c| (c + 1.0) / total).collect();
        beta.push(1.0 / total);
        let (rho, gamma, tau) = (0.5, config.hyper.gamma.shape / config.hyper.gamma.rate, 1.0);
        let path = TransitionCounts::from_path(z.first().copied().unwrap_or(0), &z, k);
        let pi_rows = (0..k)
            .map(|r| sample_pi_row(r, &beta, rho, gamma, Some(&path.n[r]), &mut rng))
            .collect();
        let state = SweepState {
            cells: Vec::new(),
            z0: z.first().copied().unwrap_or(0),
            z,
            hdp: HdpState {
                beta,
                pi_rows,
                rho,
                gamma,
                tau,
            },
            psi,
        };
        let mut sampler = Self {
            config,
            winding,
            obs,
            state,
            rng,
        };
        sampler.update_given_path()?;
        Ok(sampler)
    }

    /// Start from a given state; `seed` drives all later randomness.
    pub fn from_state(obs: Vec<ObservationCell>, config: ChainConfig, state: SweepState, seed: u64) -> Result<Self> {
        config.validate()?;
        let winding = config.winding()?;
        if state.z.len() != obs.len() || state.cells.len() != obs.len() {
            return Err(Error::Config("state and observations differ in length".into()));
        }
        state.check(&obs, winding.k_max)?;
        Ok(Self {
            config,
            winding,
            obs,
            state,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn state(&self) -> &SweepState {
        &self.state
    }

    pub fn config(&self) -> &ChainConfig {
        &self.config
    }

    pub fn observations(&self) -> &[ObservationCell] {
        &self.obs
    }

    pub fn winding(&self) -> &WindingConfig {
        &self.winding
    }

    /// Redraw every timestep's latents from the current path and emission
    /// parameters and replace the data by `record` applied to them.
    pub fn resimulate_data<F>(&mut self, mut record: F)
    where
        F: FnMut(&LatentCell, &mut ChaCha8Rng) -> ObservationCell,
    {
        let st = &mut self.state;
        for (t, &s) in st.z.iter().enumerate() {
            let cell = sample_observation(&st.psi[s], &self.config.circle, &self.winding, &mut self.rng);
            self.obs[t] = record(&cell, &mut self.rng);
            st.cells[t] = cell;
        }
    }

    pub fn sweep(&mut self) -> Result<()> {
        let st = &mut self.state;
        let rng = &mut self.rng;
        let u = beam_slice(st.z0, &st.z, &st.hdp.pi_rows, rng);
        let min_u = u.iter().copied().fold(f64::INFINITY, f64::min);
        if min_u.is_finite() {
            let added = extend_representation(&mut st.hdp, min_u, self.config.max_extensions, rng)?;
            for _ in 0..added {
                st.psi.push(self.config.priors.sample(&self.config.circle, rng));
            }
        }
        let k = st.hdp.represented();
        if !self.obs.is_empty() {
            let tables: Vec<EmissionTable> = st
                .psi
                .iter()
                .map(|p| EmissionTable::new(p, &self.config.circle, &self.winding))
                .collect();
            let mut loglik = LogLikMatrix::zeros(self.obs.len(), k);
            for (t, o) in self.obs.iter().enumerate() {
                for (v, table) in loglik.row_mut(t).iter_mut().zip(&tables) {
                    *v = table.marginal_loglik(o);
                }
            }
            st.z = ffbs_states(&loglik, &st.hdp.pi_rows, st.z0, &u, rng)?;
        }
        self.prune();
        self.update_given_path()
    }

    /// Drop states visited neither by the path nor as the initial state.
    fn prune(&mut self) {
        let st = &mut self.state;
        let mut keep = vec![false; st.hdp.represented()];
        keep[st.z0] = true;
        st.z.iter().for_each(|&s| keep[s] = true);
        let map = st.hdp.prune(&keep);
        st.z.iter_mut().for_each(|s| *s = map[*s].unwrap());
        st.z0 = map[st.z0].unwrap();
        st.psi = st
            .psi
            .iter()
            .zip(&keep)
            .filter(|(_, &k)| k)
            .map(|(p, _)| *p)
            .collect();
    }

    /// Latents, emission parameters, relabeling and the HDP block, all
    /// given the current path.
    fn update_given_path(&mut self) -> Result<()> {
        let circle = self.config.circle;
        let priors = self.config.priors;
        let st = &mut self.state;
        let rng = &mut self.rng;
        let k = st.hdp.represented();

        let tables: Vec<WindingTable> = st
            .psi
            .iter()
            .map(|p| WindingTable::new(p.iwp.lambda, &circle, &self.winding))
            .collect();
        st.cells = self
            .obs
            .iter()
            .zip(&st.z)
            .map(|(o, &s)| impute_cell_with(o, &st.psi[s], &tables[s], &circle, &self.winding, rng))
            .collect::<Result<_>>()?;

        let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
        st.z.iter().enumerate().for_each(|(t, &s)| members[s].push(t));
        for (r, idx) in members.iter().enumerate() {
            let psi = &mut st.psi[r];
            psi.lambda_y = update_lambda_y(idx.iter().map(|&t| &st.cells[t]), &priors, rng);
            psi.nu = update_nu(idx.iter().map(|&t| &st.cells[t]), rng);
            let (eta, xi) =
                update_eta_xi_collapsed(idx.iter().map(|&t| &st.cells[t]), psi.iwp.lambda, &circle, &self.winding, rng)?;
            psi.iwp.eta = eta;
            psi.iwp.xi = xi;
            let table = &tables[r];
            for &t in idx {
                if let Direction::Grid(x) = st.cells[t].x {
                    st.cells[t].k = Some(table.sample(residue(x, eta, xi, &circle), rng)?);
                }
            }
            psi.iwp.lambda = update_lambda_x(idx.iter().map(|&t| &st.cells[t]), &psi.iwp, &circle, &priors, rng);
        }

        let mut order: Vec<usize> = (0..k).collect();
        order.sort_by(|&a, &b| {
            let (pa, pb) = (&st.psi[a], &st.psi[b]);
            pa.lambda_y
                .total_cmp(&pb.lambda_y)
                .then(pa.iwp.lambda.total_cmp(&pb.iwp.lambda))
        });
        let mut inverse = vec![0; k];
        order.iter().enumerate().for_each(|(new, &old)| inverse[old] = new);
        st.hdp.permute(&order);
        st.psi = order.iter().map(|&o| st.psi[o]).collect();
        st.z.iter_mut().for_each(|s| *s = inverse[*s]);
        st.z0 = inverse[st.z0];

        let hdp = &mut st.hdp;
        let mut counts = TransitionCounts::from_path(st.z0, &st.z, k);
        sample_auxiliary_counts(&mut counts, st.z0, &hdp.beta, hdp.rho, hdp.gamma, rng);
        hdp.beta = resample_beta(&counts, hdp.tau, rng);
        let (rho, gamma, tau) = resample_hypers(&counts, hdp.gamma, hdp.tau, &self.config.hyper, rng);
        hdp.rho = rho;
        hdp.gamma = gamma;
        hdp.tau = tau;
        hdp.pi_rows = (0..k)
            .map(|r| sample_pi_row(r, &hdp.beta, rho, gamma, Some(&counts.n[r]), rng))
            .collect();
        Ok(())
    }

    pub fn draw(&self, iter: usize) -> Draw {
        let st = &self.state;
        let mut counts = vec![0usize; st.hdp.represented()];
        st.z.iter().for_each(|&s| counts[s] += 1);
        Draw {
            iter,
            occupied: counts.iter().filter(|&&c| c > 0).count(),
            rho: st.hdp.rho,
            gamma: st.hdp.gamma,
            tau: st.hdp.tau,
            beta: st.hdp.beta.clone(),
            regimes: st
                .psi
                .iter()
                .zip(&counts)
                .map(|(p, &count)| RegimeDraw {
                    lambda_y: p.lambda_y,
                    lambda_x: p.iwp.lambda,
                    eta: p.iwp.eta,
                    xi: p.iwp.xi,
                    nu: p.nu,
                    count,
                })
                .collect(),
            transition: st.hdp.pi_rows.clone(),
        }
    }
}

/// Quantile split of a speed proxy into at most `init_states` states, with
/// moment-matched emission parameters.
fn initial_assignment(obs: &[ObservationCell], config: &ChainConfig) -> (Vec<usize>, Vec<RegimeParams>) {
    let circle = &config.circle;
    let priors = &config.priors;
    let len = obs.len();
    let mut proxy: Vec<f64> = obs
        .iter()
        .map(|o| match o.speed_info() {
            SpeedInfo::Exact(y) => y as f64,
            SpeedInfo::Low => 0.5,
            SpeedInfo::Missing => f64::NAN,
        })
        .collect();
    let mut last = proxy.iter().copied().find(|v| !v.is_nan()).unwrap_or(1.0);
    for v in &mut proxy {
        if v.is_nan() {
            *v = last;
        } else {
            last = *v;
        }
    }
    let states = config.init_states.min(len.max(1));
    let mut ranked: Vec<usize> = (0..len).collect();
    ranked.sort_by(|&a, &b| proxy[a].total_cmp(&proxy[b]).then(a.cmp(&b)));
    let mut z = vec![0; len];
    for (rank, &t) in ranked.iter().enumerate() {
        z[t] = rank * states / len;
    }

    let psi = (0..states)
        .map(|s| {
            let idx: Vec<usize> = (0..len).filter(|&t| z[t] == s).collect();
            let n = idx.len().max(1) as f64;
            let lambda_y = (idx.iter().map(|&t| proxy[t]).sum::<f64>() / n).clamp(0.05, 0.99 * priors.c_y);
            let (mut c, mut si, mut grid, mut calm, mut low) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for &t in &idx {
                match obs[t].x {
                    RecordedDirection::Grid(p) => {
                        let a = circle.angle(p);
                        c += a.cos();
                        si += a.sin();
                        grid += 1.0;
                        if proxy[t] < 2.0 {
                            low += 1.0;
                        }
                    }
                    RecordedDirection::Calm => calm += 1.0,
                    RecordedDirection::Missing => {}
                }
            }
            let step = circle.step();
            let (lambda_x, mean) = if grid > 0.0 {
                let resultant = (c * c + si * si).sqrt() / grid;
                let lambda = (-resultant.max(1e-12).ln() / (1.0 - step.cos())).clamp(0.05, 0.99 * priors.lambda_max);
                (lambda, si.atan2(c))
            } else {
                (1.0, 0.0)
            };
            // mean = xi + lambda sin(step) for eta = +1
            let xi = ((mean - lambda_x * step.sin()).rem_euclid(TAU) / step).round() as usize % circle.points();
            RegimeParams {
                lambda_y,
                iwp: IwpParams {
                    lambda: lambda_x,
                    eta: Orientation::Positive,
                    xi: GridPoint(xi),
                },
                nu: (calm + 1.0) / (calm + low + 2.0),
            }
        })
        .collect();
    (z, psi)
}

/// Run `config.n_iter` sweeps and hand every retained draw to `sink`.
/// Returns the number of draws retained.
pub fn run_chain<F>(obs: Vec<ObservationCell>, config: &ChainConfig, mut sink: F) -> Result<usize>
where
    F: FnMut(&Draw) -> Result<()>,
{
    let mut sampler = Sampler::new(obs, config.clone())?;
    let mut kept = 0;
    for iter in 1..=config.n_iter {
        sampler.sweep()?;
        if iter > config.burn_in && (iter - config.burn_in).is_multiple_of(config.thin) {
            sink(&sampler.draw(iter))?;
            kept += 1;
        }
    }
    Ok(kept)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn circle() -> DiscreteCircle {
        DiscreteCircle::default()
    }

    fn winding() -> WindingConfig {
        WindingConfig::new(DEFAULT_LAMBDA_MAX, &circle()).unwrap()
    }

    fn psi(lambda_y: f64, lambda_x: f64, eta: Orientation, xi: usize, nu: f64) -> RegimeParams {
        RegimeParams {
            lambda_y,
            iwp: IwpParams {
                lambda: lambda_x,
                eta,
                xi: GridPoint(xi),
            },
            nu,
        }
    }

    fn cell(y: u32, x: Option<(usize, u32)>) -> LatentCell {
        match x {
            Some((p, k)) => LatentCell {
                y,
                w: y >= 2,
                x: Direction::Grid(GridPoint(p)),
                k: Some(k),
            },
            None => LatentCell {
                y,
                w: false,
                x: Direction::Calm,
                k: None,
            },
        }
    }

    #[test]
    fn lambda_y_prior_and_posterior() {
        let mut r = rng(1);
        let priors = EmissionPriors::default();
        for _ in 0..1000 {
            let v = update_lambda_y(std::iter::empty(), &priors, &mut r);
            assert!(v > 0.0 && v < 50.0);
        }
        let cells: Vec<LatentCell> = (0..3000).map(|_| cell(30, Some((0, 0)))).collect();
        let draws: Vec<f64> = (0..2000).map(|_| update_lambda_y(&cells, &priors, &mut r)).collect();
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        // posterior G(90001, 3000.00005) has mean 30.0003 and sd 0.1
        assert!((mean - 30.0).abs() < 0.02, "{mean}");
        assert!(draws.iter().all(|&d| d < 50.0 && d > 29.4 && d < 30.6));
    }

    #[test]
    fn lambda_x_prior_is_bounded() {
        let mut r = rng(2);
        let priors = EmissionPriors::default();
        let iwp = psi(1.0, 5.0, Orientation::Positive, 0, 0.0).iwp;
        let calm = [cell(0, None)];
        for _ in 0..1000 {
            let v = update_lambda_x(&calm, &iwp, &circle(), &priors, &mut r);
            assert!(v > 0.0 && v < 500.0);
        }
    }

    #[test]
    fn k_update_examples() {
        let mut r = rng(3);
        let c = circle();
        let w = winding();
        let iwp = psi(1.0, 1.0, Orientation::Positive, 0, 0.0).iwp;
        for x in 0..36 {
            assert_eq!(update_k(GridPoint(x), &iwp, &c, &w, &mut r).unwrap(), 0);
        }
        let iwp = psi(1.0, 300.0, Orientation::Positive, 0, 0.0).iwp;
        let mut hist = vec![0usize; w.windings()];
        for _ in 0..5000 {
            hist[update_k(GridPoint(12), &iwp, &c, &w, &mut r).unwrap() as usize] += 1;
        }
        let mode = (0..hist.len()).max_by_key(|&k| hist[k]).unwrap();
        assert!((7..=9).contains(&mode), "mode {mode}");
    }

    #[test]
    fn k_update_matches_enumeration() {
        let mut r = rng(4);
        let c = circle();
        let w = winding();
        let iwp = psi(1.0, 90.0, Orientation::Negative, 3, 0.0).iwp;
        let x = GridPoint(20);
        let ln: Vec<f64> = (0..=w.k_max)
            .map(|k| crate::circular::iwp_augmented_logpmf(x, k, &iwp, &c))
            .collect();
        let norm = crate::sampling::log_sum_exp(&ln);
        let exact: Vec<f64> = ln.iter().map(|l| (l - norm).exp()).collect();
        assert!((exact.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let n = 100_000;
        let mut hist = vec![0usize; exact.len()];
        for _ in 0..n {
            hist[update_k(x, &iwp, &c, &w, &mut r).unwrap() as usize] += 1;
        }
        for (k, &p) in exact.iter().enumerate() {
            let f = hist[k] as f64 / n as f64;
            assert!((f - p).abs() <= 3.0 * (p * (1.0 - p) / n as f64).sqrt() + 1e-9, "k={k}");
        }
    }

    #[test]
    fn winding_table_matches_direct_update() {
        let c = circle();
        let w = winding();
        let iwp = psi(1.0, 250.0, Orientation::Positive, 9, 0.0).iwp;
        let table = WindingTable::new(iwp.lambda, &c, &w);
        let n = 50_000;
        let (mut a, mut b) = (vec![0usize; w.windings()], vec![0usize; w.windings()]);
        let mut r = rng(40);
        let x = GridPoint(31);
        let res = residue(x, iwp.eta, iwp.xi, &c);
        for _ in 0..n {
            a[update_k(x, &iwp, &c, &w, &mut r).unwrap() as usize] += 1;
            b[table.sample(res, &mut r).unwrap() as usize] += 1;
        }
        for k in 0..w.windings() {
            let (pa, pb) = (a[k] as f64 / n as f64, b[k] as f64 / n as f64);
            assert!((pa - pb).abs() < 4.0 * (2.0 * pa.max(1e-4) / n as f64).sqrt(), "k={k}");
        }
        let degenerate = WindingTable::new(0.0, &c, &w);
        assert_eq!(degenerate.sample(0, &mut r).unwrap(), 0);
        assert!(degenerate.sample(3, &mut r).is_err());
    }

    #[test]
    fn eta_xi_without_cells_is_uniform() {
        let mut r = rng(5);
        let c = circle();
        let n = 72_000;
        let mut hist = vec![0usize; 72];
        for _ in 0..n {
            let (eta, xi) = update_eta_xi_collapsed(std::iter::empty(), 5.0, &c, &winding(), &mut r).unwrap();
            hist[if eta == Orientation::Negative { 0 } else { 36 } + xi.0] += 1;
        }
        let p: f64 = 1.0 / 72.0;
        for h in hist {
            let f = h as f64 / n as f64;
            assert!((f - p).abs() < 4.0 * (p * (1.0 - p) / n as f64).sqrt());
        }
    }

    #[test]
    fn eta_xi_recovers_generating_values() {
        let mut r = rng(6);
        let c = circle();
        let w = winding();
        let truth = psi(10.0, 5.0, Orientation::Negative, 5, 0.0);
        let cells: Vec<LatentCell> = (0..500).map(|_| sample_observation(&truth, &c, &w, &mut r)).collect();
        for _ in 0..50 {
            let (eta, xi) = update_eta_xi_collapsed(&cells, 5.0, &c, &w, &mut r).unwrap();
            assert_eq!((eta, xi), (Orientation::Negative, GridPoint(5)));
            let (eta, xi) = update_eta_xi(&cells, 5.0, &c, &mut r).unwrap();
            assert_eq!((eta, xi), (Orientation::Negative, GridPoint(5)));
        }
    }

    #[test]
    fn collapsed_and_fixed_k_agree_when_windings_are_trivial() {
        // with lambda_x small every k is 0, so both conditionals coincide
        let mut r = rng(7);
        let c = circle();
        let w = winding();
        let truth = psi(10.0, 2.0, Orientation::Positive, 30, 0.0);
        let cells: Vec<LatentCell> = (0..6).map(|_| sample_observation(&truth, &c, &w, &mut r)).collect();
        let n = 40_000;
        let mut a = std::collections::HashMap::new();
        let mut b = std::collections::HashMap::new();
        for _ in 0..n {
            *a.entry(update_eta_xi(&cells, 2.0, &c, &mut r).unwrap()).or_insert(0usize) += 1;
            *b.entry(update_eta_xi_collapsed(&cells, 2.0, &c, &w, &mut r).unwrap()).or_insert(0usize) += 1;
        }
        for (key, &ca) in &a {
            let cb = *b.get(key).unwrap_or(&0) as f64;
            let p = ca as f64 / n as f64;
            assert!((p - cb / n as f64).abs() < 5.0 * (2.0 * p * (1.0 - p) / n as f64).sqrt() + 1e-3);
        }
    }

    #[test]
    fn nu_examples() {
        let mut r = rng(8);
        let n = 20_000;
        let prior_mean = (0..n).map(|_| update_nu(std::iter::empty(), &mut r)).sum::<f64>() / n as f64;
        assert!((prior_mean - 0.5).abs() < 0.01);
        let mut cells: Vec<LatentCell> = (0..100).map(|_| cell(0, None)).collect();
        cells.extend((0..900).map(|_| cell(0, Some((3, 0)))));
        cells.extend((0..500).map(|_| cell(7, Some((3, 0)))));
        let mean = (0..n).map(|_| update_nu(&cells, &mut r)).sum::<f64>() / n as f64;
        assert!((mean - 101.0 / 1002.0).abs() < 0.001, "{mean}");
    }

    #[test]
    fn imputation_examples() {
        let mut r = rng(9);
        let c = circle();
        let w = winding();
        let p = psi(1.0, 3.0, Orientation::Positive, 0, 0.4);
        let calm = ObservationCell::new(Some(0), RecordedDirection::Calm).unwrap();
        let missing_calm = ObservationCell::new(None, RecordedDirection::Calm).unwrap();
        for _ in 0..100 {
            assert_eq!(impute_y_w(&calm, &p, &mut r), (0, false));
            assert_eq!(impute_y_w(&missing_calm, &p, &mut r), (0, false));
        }
        // without the hurdle, y* = 0 next to a direction gives P(y = 1) = 1/2 at lambda = 1
        let p0 = psi(1.0, 3.0, Orientation::Positive, 0, 0.0);
        let low = ObservationCell::new(Some(0), RecordedDirection::Grid(GridPoint(4))).unwrap();
        let n = 100_000;
        let ones = (0..n).filter(|_| impute_y_w(&low, &p0, &mut r).0 == 1).count() as f64 / n as f64;
        assert!((ones - 0.5).abs() < 3.0 * (0.25 / n as f64).sqrt());
        // the hurdle shifts it to lambda / (lambda + 1 - nu)
        let ones = (0..n).filter(|_| impute_y_w(&low, &p, &mut r).0 == 1).count() as f64 / n as f64;
        let e = 1.0 / 1.6;
        assert!((ones - e).abs() < 3.0 * (e * (1.0 - e) / n as f64).sqrt());

        let p10 = psi(10.0, 3.0, Orientation::Positive, 0, 0.1);
        let gone = ObservationCell::missing();
        let mean = (0..n).map(|_| impute_y_w(&gone, &p10, &mut r).0 as f64).sum::<f64>() / n as f64;
        assert!((mean - 10.0).abs() < 3.0 * (10.0 / n as f64).sqrt());
        for _ in 0..1000 {
            let (y, wv) = impute_y_w(&gone, &p10, &mut r);
            assert_eq!(wv, y >= 2);
        }

        let point = psi(3.0, 0.0, Orientation::Positive, 7, 0.5);
        for _ in 0..100 {
            assert_eq!(impute_x(3, &point, &c, &w, &mut r), (Direction::Grid(GridPoint(7)), Some(0)));
            assert_eq!(impute_x(0, &psi(3.0, 1.0, Orientation::Positive, 0, 1.0), &c, &w, &mut r), (Direction::Calm, None));
        }
        let hurdle = psi(3.0, 1.0, Orientation::Positive, 0, 0.1);
        let calm_frac = (0..n)
            .filter(|_| impute_x(0, &hurdle, &c, &w, &mut r).0 == Direction::Calm)
            .count() as f64
            / n as f64;
        assert!((calm_frac - 0.1).abs() < 3.0 * (0.09 / n as f64).sqrt());
    }

    /// Exact conditional of `y` given a recording, from the augmented law.
    fn exact_speed_conditional(obs: &ObservationCell, p: &RegimeParams, ymax: u32) -> Vec<f64> {
        let c = circle();
        let w = winding();
        let table = EmissionTable::new(p, &c, &w);
        let mut probs: Vec<f64> = (0..=ymax)
            .map(|y| {
                let speed_ok = match obs.speed_info() {
                    SpeedInfo::Exact(v) => v == y,
                    SpeedInfo::Low => y < 2,
                    SpeedInfo::Missing => true,
                };
                if !speed_ok {
                    return 0.0;
                }
                let py = ln_poisson(y as u64, p.lambda_y).exp();
                let nu = if y == 0 { p.nu } else { 0.0 };
                let px = match obs.x {
                    RecordedDirection::Calm => nu,
                    RecordedDirection::Grid(g) => (1.0 - nu) * table.ln_direction[g.0].exp(),
                    RecordedDirection::Missing => 1.0,
                };
                py * px
            })
            .collect();
        let total: f64 = probs.iter().sum();
        probs.iter_mut().for_each(|v| *v /= total);
        probs
    }

    #[test]
    fn speed_imputation_matches_exact_conditional() {
        let mut r = rng(10);
        let p = psi(1.7, 4.0, Orientation::Positive, 2, 0.3);
        let cases = [
            ObservationCell::new(Some(1), RecordedDirection::Grid(GridPoint(5))).unwrap(),
            ObservationCell::new(Some(0), RecordedDirection::Missing).unwrap(),
            ObservationCell::new(None, RecordedDirection::Grid(GridPoint(5))).unwrap(),
            ObservationCell::new(None, RecordedDirection::Missing).unwrap(),
        ];
        let n = 100_000;
        for obs in &cases {
            let exact = exact_speed_conditional(obs, &p, 30);
            let mut hist = vec![0usize; 31];
            for _ in 0..n {
                let (y, _) = impute_y_w(obs, &p, &mut r);
                hist[y.min(30) as usize] += 1;
            }
            for (y, &e) in exact.iter().enumerate() {
                let f = hist[y] as f64 / n as f64;
                assert!((f - e).abs() <= 4.0 * (e * (1.0 - e) / n as f64).sqrt() + 1e-9, "{obs:?} y={y}: {f} vs {e}");
            }
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = ChainConfig::default();
        assert!(cfg.validate().is_ok());
        assert_eq!(cfg.retained(), 5000);
        cfg.burn_in = cfg.n_iter;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = ChainConfig::default();
        cfg.thin = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = ChainConfig::default();
        cfg.priors.c_y = 0.0;
        assert!(cfg.validate().is_err());
    }

    fn tiny_config(seed: u64) -> ChainConfig {
        ChainConfig {
            n_iter: 30,
            burn_in: 10,
            thin: 2,
            seed,
            ..ChainConfig::default()
        }
    }

    fn toy_data(len: usize, seed: u64) -> Vec<ObservationCell> {
        let mut r = rng(seed);
        let c = circle();
        let w = winding();
        let regimes = [psi(1.0, 5.0, Orientation::Negative, 5, 0.1), psi(20.0, 1.0, Orientation::Positive, 15, 0.0)];
        (0..len)
            .map(|t| sample_observation(&regimes[(t / 40) % 2], &c, &w, &mut r).recorded())
            .collect()
    }

    #[test]
    fn sweeps_keep_state_invariants() {
        let obs = toy_data(200, 11);
        let mut sampler = Sampler::new(obs.clone(), tiny_config(3)).unwrap();
        for _ in 0..30 {
            sampler.sweep().unwrap();
            let st = sampler.state();
            st.check(&obs, sampler.winding().k_max).unwrap();
            assert!((st.hdp.beta.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            for w in st.psi.windows(2) {
                assert!(w[0].lambda_y <= w[1].lambda_y);
            }
        }
    }

    #[test]
    fn identical_seeds_give_identical_draws() {
        let obs = toy_data(120, 12);
        let mut a = Vec::new();
        let mut b = Vec::new();
        assert_eq!(run_chain(obs.clone(), &tiny_config(5), |d| Ok(a.push(d.clone()))).unwrap(), 10);
        run_chain(obs, &tiny_config(5), |d| Ok(b.push(d.clone()))).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[0].iter, 12);
    }

    #[test]
    fn empty_sequence_runs_on_the_prior() {
        let mut draws = Vec::new();
        run_chain(Vec::new(), &tiny_config(6), |d| Ok(draws.push(d.clone()))).unwrap();
        assert!(draws.iter().all(|d| d.occupied == 0 && d.regimes.len() == 1));
    }

    #[test]
    fn prior_state_is_consistent() {
        let mut r = rng(13);
        let cfg = ChainConfig::default();
        for _ in 0..20 {
            let st = sample_prior_state(100, &cfg, &mut r).unwrap();
            let obs: Vec<ObservationCell> = st.cells.iter().map(|c| c.recorded()).collect();
            st.check(&obs, cfg.winding().unwrap().k_max).unwrap();
        }
    }
}
