//! Sticky HDP-HMM machinery for a beam sampler.
//!
//! Only finitely many states are represented at any time. `beta` holds the
//! global weights of the represented states followed by the remainder mass
//! of all others, and each transition row is laid out the same way. The
//! sampler alternates slice thresholds, lazy stick extension, a
//! slice-restricted forward-filter backward-sample of the state path, and
//! conjugate updates of `beta`, the rows, and `(rho, gamma, tau)` through
//! the auxiliary table counts of the sticky Chinese restaurant franchise.
//!
//! The initial state `z_0` is a fixed represented state that counts as one
//! extra top-level draw from `beta`; this is the exchangeable form of
//! pinning `z_0` to the first stick.

use rand::Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampling::{beta as beta_variate, categorical_log, dirichlet, gamma as gamma_variate, open_unit};

pub const DEFAULT_MAX_EXTENSIONS: usize = 10_000;

/// Shape/rate pair of a gamma prior.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaPrior {
    pub shape: f64,
    pub rate: f64,
}

impl GammaPrior {
    pub fn new(shape: f64, rate: f64) -> Result<Self> {
        if !(shape > 0.0 && rate > 0.0) {
            return Err(Error::Config(format!("gamma prior needs positive shape and rate, got ({shape}, {rate})")));
        }
        Ok(Self { shape, rate })
    }
}

/// Priors on the row precision `gamma` and the stick precision `tau`;
/// `rho` is uniform on (0, 1).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperPriors {
    pub gamma: GammaPrior,
    pub tau: GammaPrior,
}

impl Default for HyperPriors {
    fn default() -> Self {
        Self {
            gamma: GammaPrior { shape: 1.0, rate: 0.1 },
            tau: GammaPrior { shape: 1.0, rate: 0.1 },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HdpState {
    /// Global weights of represented states, remainder last.
    pub beta: Vec<f64>,
    /// One row per represented state, remainder last.
    pub pi_rows: Vec<Vec<f64>>,
    pub rho: f64,
    pub gamma: f64,
    pub tau: f64,
}

/// Output of [`stick_break`].
#[derive(Debug, Clone, PartialEq)]
pub struct StickBreaks {
    pub weights: Vec<f64>,
    pub remainder: f64,
}

/// `beta_r = beta*_r prod_{j<r} (1 - beta*_j)`, with the unbroken remainder.
pub fn stick_break(beta_star: &[f64]) -> StickBreaks {
    let mut remainder = 1.0;
    let weights = beta_star
        .iter()
        .map(|&b| {
            let w = remainder * b;
            remainder *= 1.0 - b;
            w
        })
        .collect();
    StickBreaks { weights, remainder }
}

/// Beta draw that tolerates a zero parameter (all mass on one side).
fn beta_split<R: Rng + ?Sized>(a: f64, b: f64, rng: &mut R) -> f64 {
    match (a > 0.0, b > 0.0) {
        (true, true) => beta_variate(a, b, rng),
        (true, false) => 1.0,
        (false, true) => 0.0,
        (false, false) => 0.5,
    }
}

/// Dirichlet draw of row `r` (length `K + 1`) given `beta` (length `K + 1`)
/// and optional transition counts out of `r` (length `K`).
pub fn sample_pi_row<R: Rng + ?Sized>(
    r: usize,
    beta: &[f64],
    rho: f64,
    gamma: f64,
    counts: Option<&[u64]>,
    rng: &mut R,
) -> Vec<f64> {
    let k = beta.len() - 1;
    let mut alpha: Vec<f64> = (0..k)
        .map(|j| {
            let sticky = if j == r { rho } else { 0.0 };
            gamma * ((1.0 - rho) * beta[j] + sticky) + counts.map_or(0.0, |c| c[j] as f64)
        })
        .collect();
    alpha.push(gamma * (1.0 - rho) * beta[k]);
    dirichlet(&alpha, rng)
}

/// Slice thresholds `u_t ~ U(0, pi[z_{t-1}][z_t])`, `z_{-1}` being `z0`.
pub fn beam_slice<R: Rng + ?Sized>(z0: usize, z: &[usize], pi_rows: &[Vec<f64>], rng: &mut R) -> Vec<f64> {
    let mut prev = z0;
    z.iter()
        .map(|&s| {
            let u = open_unit(rng) * pi_rows[prev][s];
            prev = s;
            u
        })
        .collect()
}

impl HdpState {
    /// A single represented state with every weight drawn from the prior.
    pub fn from_prior<R: Rng + ?Sized>(rho: f64, gamma: f64, tau: f64, rng: &mut R) -> Self {
        let b = beta_variate(1.0, tau, rng);
        let beta = vec![b, 1.0 - b];
        let row = sample_pi_row(0, &beta, rho, gamma, None, rng);
        Self {
            beta,
            pi_rows: vec![row],
            rho,
            gamma,
            tau,
        }
    }

    pub fn represented(&self) -> usize {
        self.pi_rows.len()
    }

    pub fn beta_rest(&self) -> f64 {
        *self.beta.last().unwrap()
    }

    fn max_row_remainder(&self) -> f64 {
        self.pi_rows
            .iter()
            .map(|row| *row.last().unwrap())
            .fold(0.0, f64::max)
    }

    /// Break one more stick off the remainder and instantiate its state.
    pub fn add_state<R: Rng + ?Sized>(&mut self, rng: &mut R) -> usize {
        let k = self.represented();
        let rest = self.beta_rest();
        let b = beta_split(1.0, self.tau, rng);
        let new_weight = rest * b;
        let new_rest = rest * (1.0 - b);
        self.beta[k] = new_weight;
        self.beta.push(new_rest);
        let scale = self.gamma * (1.0 - self.rho);
        for row in &mut self.pi_rows {
            let row_rest = row[k];
            let frac = beta_split(scale * new_weight, scale * new_rest, rng);
            row[k] = row_rest * frac;
            row.push(row_rest * (1.0 - frac));
        }
        let new_row = sample_pi_row(k, &self.beta, self.rho, self.gamma, None, rng);
        self.pi_rows.push(new_row);
        k
    }

    /// Draw the successor of `from` under the prior chain, instantiating
    /// states as needed. Returns the state and how many were added.
    pub fn sample_successor<R: Rng + ?Sized>(&mut self, from: usize, rng: &mut R) -> (usize, usize) {
        let v = rng.random::<f64>();
        let mut added = 0;
        let mut cum = 0.0;
        let mut j = 0;
        loop {
            let k = self.represented();
            while j < k {
                cum += self.pi_rows[from][j];
                if v < cum {
                    return (j, added);
                }
                j += 1;
            }
            if self.pi_rows[from][k] <= 0.0 {
                // remainder exhausted by rounding
                return (k - 1, added);
            }
            self.add_state(rng);
            added += 1;
        }
    }

    /// Drop states flagged `false`, folding their mass into the remainders.
    /// Returns the old-to-new index map.
    pub fn prune(&mut self, keep: &[bool]) -> Vec<Option<usize>> {
        let k = self.represented();
        assert_eq!(keep.len(), k);
        let mut map = vec![None; k];
        let mut next = 0;
        for (old, &kept) in keep.iter().enumerate() {
            if kept {
                map[old] = Some(next);
                next += 1;
            }
        }
        let fold = |v: &[f64]| -> Vec<f64> {
            let mut out: Vec<f64> = (0..k).filter(|&i| keep[i]).map(|i| v[i]).collect();
            let rest: f64 = v[k] + (0..k).filter(|&i| !keep[i]).map(|i| v[i]).sum::<f64>();
            out.push(rest);
            out
        };
        self.beta = fold(&self.beta);
        self.pi_rows = (0..k).filter(|&i| keep[i]).map(|i| fold(&self.pi_rows[i])).collect();
        map
    }

    /// Reorder represented states so that new index `i` is old `order[i]`.
    pub fn permute(&mut self, order: &[usize]) {
        let k = self.represented();
        assert_eq!(order.len(), k);
        let reorder = |v: &[f64]| -> Vec<f64> {
            let mut out: Vec<f64> = order.iter().map(|&o| v[o]).collect();
            out.push(v[k]);
            out
        };
        self.beta = reorder(&self.beta);
        self.pi_rows = order.iter().map(|&o| reorder(&self.pi_rows[o])).collect();
    }
}

/// Instantiate states until every row's remainder is below `min_u`.
/// Returns the number of states added.
pub fn extend_representation<R: Rng + ?Sized>(
    state: &mut HdpState,
    min_u: f64,
    max_extensions: usize,
    rng: &mut R,
) -> Result<usize> {
    let mut added = 0;
    while state.max_row_remainder() >= min_u {
        if added >= max_extensions {
            return Err(Error::Degenerate(format!(
                "row remainder still {:.3e} >= slice {:.3e} after {added} extensions",
                state.max_row_remainder(),
                min_u
            )));
        }
        state.add_state(rng);
        added += 1;
    }
    Ok(added)
}

/// Row-major `T x K` matrix of per-state observation log-likelihoods.
#[derive(Debug, Clone, PartialEq)]
pub struct LogLikMatrix {
    states: usize,
    values: Vec<f64>,
}

impl LogLikMatrix {
    pub fn new(states: usize, values: Vec<f64>) -> Self {
        assert!(states > 0 && values.len().is_multiple_of(states));
        Self { states, values }
    }

    pub fn zeros(len: usize, states: usize) -> Self {
        Self::new(states, vec![0.0; len * states])
    }

    pub fn states(&self) -> usize {
        self.states
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.states
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.values[t * self.states..(t + 1) * self.states]
    }

    pub fn row_mut(&mut self, t: usize) -> &mut [f64] {
        &mut self.values[t * self.states..(t + 1) * self.states]
    }
}

/// Joint draw of the state path given slice thresholds: a transition
/// `i -> j` at step `t` is admissible iff `pi[i][j] > u_t`.
pub fn ffbs_states<R: Rng + ?Sized>(
    loglik: &LogLikMatrix,
    pi_rows: &[Vec<f64>],
    z0: usize,
    u: &[f64],
    rng: &mut R,
) -> Result<Vec<usize>> {
    let len = loglik.len();
    let k = loglik.states();
    assert_eq!(u.len(), len);
    assert_eq!(pi_rows.len(), k);
    if len == 0 {
        return Ok(Vec::new());
    }
    let mut log_alpha = vec![f64::NEG_INFINITY; len * k];
    let mut scaled = vec![0.0; k];
    let mut sums = vec![0.0; k];
    let mut prev_init = vec![f64::NEG_INFINITY; k];
    prev_init[z0] = 0.0;

    for t in 0..len {
        let (done, rest) = log_alpha.split_at_mut(t * k);
        let prev: &[f64] = if t == 0 { &prev_init } else { &done[(t - 1) * k..] };
        let current = &mut rest[..k];
        let max_prev = prev.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for (s, &p) in scaled.iter_mut().zip(prev) {
            *s = (p - max_prev).exp();
        }
        sums.iter_mut().for_each(|s| *s = 0.0);
        for (i, row) in pi_rows.iter().enumerate() {
            let a = scaled[i];
            if a == 0.0 {
                continue;
            }
            for (j, s) in sums.iter_mut().enumerate() {
                if row[j] > u[t] {
                    *s += a;
                }
            }
        }
        let ll = loglik.row(t);
        let mut any = false;
        for j in 0..k {
            let inflow = if sums[j] > 0.0 {
                max_prev + sums[j].ln()
            } else {
                // every admissible predecessor may have underflowed
                admissible_log_sum(prev, pi_rows, j, u[t])
            };
            current[j] = ll[j] + inflow;
            any |= current[j] > f64::NEG_INFINITY;
        }
        if !any {
            return Err(Error::Degenerate(format!("empty admissible state set at t = {}", t + 1)));
        }
    }

    let mut z = vec![0; len];
    let last = &log_alpha[(len - 1) * k..];
    z[len - 1] = categorical_log(last, rng)
        .ok_or_else(|| Error::Degenerate("no admissible final state".into()))?;
    let mut weights = vec![0.0; k];
    for t in (0..len - 1).rev() {
        let next = z[t + 1];
        for i in 0..k {
            weights[i] = if pi_rows[i][next] > u[t + 1] {
                log_alpha[t * k + i]
            } else {
                f64::NEG_INFINITY
            };
        }
        z[t] = categorical_log(&weights, rng)
            .ok_or_else(|| Error::Degenerate(format!("slice inconsistency at t = {}", t + 1)))?;
    }
    Ok(z)
}

fn admissible_log_sum(prev: &[f64], pi_rows: &[Vec<f64>], j: usize, u: f64) -> f64 {
    let admissible = || (0..prev.len()).filter(move |&i| pi_rows[i][j] > u).map(|i| prev[i]);
    let max = admissible().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + admissible().map(|p| (p - max).exp()).sum::<f64>().ln()
}

/// Transition counts of a path plus the auxiliary restaurant counts.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TransitionCounts {
    /// `n[j][k]`: transitions `j -> k`, including `z0 -> z_1`.
    pub n: Vec<Vec<u64>>,
    /// `m[j][k]`: tables in restaurant `j` serving dish `k`.
    pub tables: Vec<Vec<u64>>,
    /// Override (self-transition) tables per restaurant.
    pub overrides: Vec<u64>,
    /// Override-corrected tables per dish, plus one for `z0`.
    pub dish_tables: Vec<u64>,
}

impl TransitionCounts {
    pub fn from_path(z0: usize, z: &[usize], states: usize) -> Self {
        let mut n = vec![vec![0u64; states]; states];
        let mut prev = z0;
        for &s in z {
            n[prev][s] += 1;
            prev = s;
        }
        Self {
            n,
            ..Default::default()
        }
    }

    pub fn states(&self) -> usize {
        self.n.len()
    }

    pub fn total(&self) -> u64 {
        self.n.iter().flatten().sum()
    }

    pub fn row_total(&self, j: usize) -> u64 {
        self.n[j].iter().sum()
    }
}

/// Sample table counts and self-transition overrides given `beta`, `rho`
/// and `gamma`, and accumulate the per-dish counts used by the `beta` and
/// `tau` updates.
pub fn sample_auxiliary_counts<R: Rng + ?Sized>(
    counts: &mut TransitionCounts,
    z0: usize,
    beta: &[f64],
    rho: f64,
    gamma: f64,
    rng: &mut R,
) {
    let k = counts.states();
    counts.tables = vec![vec![0u64; k]; k];
    counts.overrides = vec![0u64; k];
    counts.dish_tables = vec![0u64; k];
    for j in 0..k {
        for d in 0..k {
            let customers = counts.n[j][d];
            if customers == 0 {
                continue;
            }
            let sticky = if j == d { rho } else { 0.0 };
            let theta = gamma * ((1.0 - rho) * beta[d] + sticky);
            let mut m = 0u64;
            for i in 0..customers {
                if rng.random::<f64>() * (theta + i as f64) < theta {
                    m += 1;
                }
            }
            // the first customer always opens a table
            counts.tables[j][d] = m.max(1);
        }
        let m_jj = counts.tables[j][j];
        if m_jj > 0 {
            let denom = rho + beta[j] * (1.0 - rho);
            let p = if denom > 0.0 { (rho / denom).clamp(0.0, 1.0) } else { 0.0 };
            counts.overrides[j] = Binomial::new(m_jj, p).unwrap().sample(rng);
        }
    }
    for j in 0..k {
        for d in 0..k {
            let m = counts.tables[j][d];
            counts.dish_tables[d] += if j == d { m - counts.overrides[j] } else { m };
        }
    }
    counts.dish_tables[z0] += 1;
}

/// `beta ~ Dir(dish_tables..., tau)` over represented states plus remainder.
pub fn resample_beta<R: Rng + ?Sized>(counts: &TransitionCounts, tau: f64, rng: &mut R) -> Vec<f64> {
    let mut alpha: Vec<f64> = counts.dish_tables.iter().map(|&m| m as f64).collect();
    alpha.push(tau);
    dirichlet(&alpha, rng)
}

/// Draw `(rho, gamma, tau)` from their conditionals given the auxiliary
/// counts, using Escobar-West auxiliary variables for both precisions.
pub fn resample_hypers<R: Rng + ?Sized>(
    counts: &TransitionCounts,
    gamma: f64,
    tau: f64,
    priors: &HyperPriors,
    rng: &mut R,
) -> (f64, f64, f64) {
    let total_tables: u64 = counts.tables.iter().flatten().sum();
    let total_overrides: u64 = counts.overrides.iter().sum();
    let rho = beta_variate(
        1.0 + total_overrides as f64,
        1.0 + (total_tables - total_overrides) as f64,
        rng,
    );

    let mut shape = priors.gamma.shape + total_tables as f64;
    let mut rate = priors.gamma.rate;
    for j in 0..counts.states() {
        let nj = counts.row_total(j) as f64;
        if nj == 0.0 {
            continue;
        }
        let r = beta_variate(gamma + 1.0, nj, rng);
        rate -= r.ln();
        if rng.random::<f64>() * (nj + gamma) < nj {
            shape -= 1.0;
        }
    }
    let new_gamma = gamma_variate(shape, rate, rng);

    let dishes = counts.dish_tables.iter().filter(|&&m| m > 0).count() as f64;
    let customers: u64 = counts.dish_tables.iter().sum();
    let new_tau = if customers == 0 {
        gamma_variate(priors.tau.shape, priors.tau.rate, rng)
    } else {
        let eta = beta_variate(tau + 1.0, customers as f64, rng);
        let rate = priors.tau.rate - eta.ln();
        let odds = (priors.tau.shape + dishes - 1.0) / (customers as f64 * rate);
        let shape = if rng.random::<f64>() * (1.0 + odds) < odds {
            priors.tau.shape + dishes
        } else {
            priors.tau.shape + dishes - 1.0
        };
        gamma_variate(shape, rate, rng)
    };
    (rho, new_gamma, new_tau)
}
