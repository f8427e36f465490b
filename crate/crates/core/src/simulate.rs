//! Synthetic datasets from a finite-state version of the model, including
//! the four built-in three-regime studies.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::circular::{DiscreteCircle, GridPoint, IwpParams, Orientation, WindingConfig, DEFAULT_LAMBDA_MAX};
use crate::emission::{sample_observation, LatentCell, ObservationCell, RecordedDirection, RegimeParams};
use crate::error::{Error, Result};
use crate::sampling::categorical;

/// How an instrument reports a true speed below 2 knots.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum CensorRule {
    /// Report the true value.
    #[default]
    Identity,
    /// Report 0 or 1 with equal probability.
    Uniform,
    /// Always report 0.
    Zero,
}

/// Independent, non-informative loss of recorded fields.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Dropout {
    pub speed: f64,
    pub direction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSpec {
    pub psi: Vec<RegimeParams>,
    /// Row-stochastic `R x R` matrix.
    pub transition: Vec<Vec<f64>>,
    pub len: usize,
    pub circle: DiscreteCircle,
    pub lambda_max: f64,
    pub seed: u64,
    pub censor: CensorRule,
    pub dropout: Dropout,
}

impl SimSpec {
    pub fn regimes(&self) -> usize {
        self.psi.len()
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.regimes();
        if r == 0 {
            return Err(Error::Config("at least one regime is required".into()));
        }
        if self.transition.len() != r || self.transition.iter().any(|row| row.len() != r) {
            return Err(Error::Config(format!("transition matrix must be {r} x {r}")));
        }
        for (i, row) in self.transition.iter().enumerate() {
            if row.iter().any(|&p| !(p >= 0.0)) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!("transition row {i} is not a probability vector")));
            }
        }
        for p in &self.psi {
            RegimeParams::new(p.lambda_y, p.iwp, p.nu)?;
            IwpParams::new(p.iwp.lambda, p.iwp.eta, p.iwp.xi, &self.circle)?;
            if p.iwp.lambda > self.lambda_max {
                return Err(Error::Config(format!(
                    "IWP rate {} exceeds lambda_max {}",
                    p.iwp.lambda, self.lambda_max
                )));
            }
        }
        for (name, v) in [("speed", self.dropout.speed), ("direction", self.dropout.direction)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} dropout must lie in [0, 1], got {v}")));
            }
        }
        Ok(())
    }

    /// Stationary distribution of the transition matrix by power iteration.
    pub fn stationary(&self) -> Vec<f64> {
        let r = self.regimes();
        let mut p = vec![1.0 / r as f64; r];
        for _ in 0..10_000 {
            let next: Vec<f64> = (0..r)
                .map(|j| (0..r).map(|i| p[i] * self.transition[i][j]).sum())
                .collect();
            let diff: f64 = next.iter().zip(&p).map(|(a, b)| (a - b).abs()).sum();
            p = next;
            if diff < 1e-15 {
                break;
            }
        }
        p
    }
}

/// One of the four three-regime studies: `T = 3000` on the 36-point
/// circle, self-transition 0.8 and every other transition 0.1.
pub fn builtin_example(id: u32) -> Result<SimSpec> {
    let (lambda_y, lambda_x, xi) = match id {
        1 => ([1.0, 10.0, 30.0], [5.0, 1.0, 5.0], [5, 15, 0]),
        2 => ([1.0, 5.0, 10.0], [5.0, 1.0, 5.0], [10, 15, 10]),
        3 => ([1.0, 10.0, 30.0], [300.0, 1.0, 5.0], [5, 15, 0]),
        4 => ([1.0, 5.0, 10.0], [300.0, 1.0, 5.0], [10, 15, 10]),
        _ => return Err(Error::Config(format!("unknown example {id}, expected 1 to 4"))),
    };
    let eta = [Orientation::Negative, Orientation::Positive, Orientation::Positive];
    let nu = [0.1, 0.0, 0.0];
    let psi = (0..3)
        .map(|r| RegimeParams {
            lambda_y: lambda_y[r],
            iwp: IwpParams {
                lambda: lambda_x[r],
                eta: eta[r],
                xi: GridPoint(xi[r]),
            },
            nu: nu[r],
        })
        .collect();
    let transition = (0..3)
        .map(|i| (0..3).map(|j| if i == j { 0.8 } else { 0.1 }).collect())
        .collect();
    Ok(SimSpec {
        psi,
        transition,
        len: 3000,
        circle: DiscreteCircle::default(),
        lambda_max: DEFAULT_LAMBDA_MAX,
        seed: 0,
        censor: CensorRule::Identity,
        dropout: Dropout::default(),
    })
}

/// `y*` for a true speed `y`.
pub fn apply_recording_censor<R: Rng + ?Sized>(y: u32, rule: CensorRule, rng: &mut R) -> u32 {
    if y >= 2 {
        return y;
    }
    match rule {
        CensorRule::Identity => y,
        CensorRule::Uniform => rng.random_range(0..2),
        CensorRule::Zero => 0,
    }
}

/// Turn a complete latent cell into what the instrument stores.
pub fn record<R: Rng + ?Sized>(cell: &LatentCell, censor: CensorRule, dropout: &Dropout, rng: &mut R) -> ObservationCell {
    let y_star = apply_recording_censor(cell.y, censor, rng);
    let y_star = (rng.random::<f64>() >= dropout.speed).then_some(y_star);
    let x = if rng.random::<f64>() < dropout.direction {
        RecordedDirection::Missing
    } else {
        cell.x.into()
    };
    ObservationCell { y_star, x }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRecord {
    /// Zero-based regime.
    pub state: usize,
    pub cell: LatentCell,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedData {
    pub observations: Vec<ObservationCell>,
    pub truth: Vec<TruthRecord>,
}

/// Run the chain from `z_0 = 0` and emit each step's recording and truth.
pub fn simulate_dataset<R: Rng + ?Sized>(spec: &SimSpec, rng: &mut R) -> Result<SimulatedData> {
    spec.validate()?;
    let winding = WindingConfig::new(spec.lambda_max, &spec.circle)?;
    let mut state = 0;
    let mut observations = Vec::with_capacity(spec.len);
    let mut truth = Vec::with_capacity(spec.len);
    for _ in 0..spec.len {
        state = categorical(&spec.transition[state], rng).expect("validated transition row");
        let cell = sample_observation(&spec.psi[state], &spec.circle, &winding, rng);
        observations.push(record(&cell, spec.censor, &spec.dropout, rng));
        truth.push(TruthRecord { state, cell });
    }
    Ok(SimulatedData { observations, truth })
}

/// [`simulate_dataset`] with a generator seeded from `spec.seed`.
pub fn simulate_seeded(spec: &SimSpec) -> Result<SimulatedData> {
    simulate_dataset(spec, &mut ChaCha8Rng::seed_from_u64(spec.seed))
}
