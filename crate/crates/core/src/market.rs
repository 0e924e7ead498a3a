//! Volume paths, the periodic bidding loop and episode cost accounting.

use std::fmt::Write as _;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::controllers::{Controller, Observation};
use crate::error::{invalid, Error, Result};
use crate::landscape::{Response, ResponsePoint, ScaledResponse};

/// Permanent division of available volume by `factor` from period `start` on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Shock {
    pub start: usize,
    pub factor: f64,
}

/// Euler step of the volume random walk with period length `delta`, clamped at 0.
pub fn step_volume(h: f64, drift: f64, sigma: f64, delta: f64, normal_draw: f64) -> f64 {
    (h + drift * delta + sigma * delta.sqrt() * normal_draw).max(0.0)
}

/// Applies every shock active at period `t`; factors compose multiplicatively.
pub fn apply_shock(intensity: f64, t: usize, shocks: &[Shock]) -> Result<f64> {
    let mut out = intensity;
    for s in shocks {
        if !(s.factor >= 1.0) {
            return Err(invalid(format!("shock factor must be >= 1, got {}", s.factor)));
        }
        if t >= s.start {
            out /= s.factor;
        }
    }
    Ok(out)
}

/// Generator of per-period volume intensities.
///
/// The walk starts at `base_curve[0]` and follows the base curve's increments
/// plus `drift`, with Brownian noise of `sigma` per square-root period.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeScenario {
    pub base_curve: Vec<f64>,
    #[serde(default)]
    pub drift: f64,
    #[serde(default)]
    pub sigma: f64,
    #[serde(default)]
    pub shocks: Vec<Shock>,
}

impl VolumeScenario {
    pub fn constant(level: f64, periods: usize) -> Self {
        Self::from_curve(vec![level; periods])
    }

    pub fn linear(start: f64, end: f64, periods: usize) -> Self {
        let last = (periods.max(2) - 1) as f64;
        Self::from_curve(
            (0..periods)
                .map(|t| start + (end - start) * t as f64 / last)
                .collect(),
        )
    }

    pub fn from_curve(base_curve: Vec<f64>) -> Self {
        Self {
            base_curve,
            drift: 0.0,
            sigma: 0.0,
            shocks: Vec::new(),
        }
    }

    pub fn with_sigma(mut self, sigma: f64) -> Self {
        self.sigma = sigma;
        self
    }

    pub fn with_shock(mut self, start: usize, factor: f64) -> Self {
        self.shocks.push(Shock { start, factor });
        self
    }

    pub fn periods(&self) -> usize {
        self.base_curve.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_curve.is_empty() {
            return Err(invalid("volume scenario needs at least one period"));
        }
        if let Some(v) = self.base_curve.iter().find(|v| !(**v >= 0.0)) {
            return Err(invalid(format!("base curve values must be >= 0, got {v}")));
        }
        if !(self.sigma >= 0.0) {
            return Err(invalid(format!("sigma must be >= 0, got {}", self.sigma)));
        }
        if let Some(s) = self.shocks.iter().find(|s| !(s.factor >= 1.0)) {
            return Err(invalid(format!("shock factor must be >= 1, got {}", s.factor)));
        }
        Ok(())
    }

    /// Realized intensities given one standard-normal draw per transition.
    pub fn path_from_draws(&self, draws: &[f64]) -> Result<Vec<f64>> {
        self.validate()?;
        let n = self.periods();
        let mut path = Vec::with_capacity(n);
        let mut h = self.base_curve[0];
        for t in 0..n {
            if t > 0 {
                let mu = self.base_curve[t] - self.base_curve[t - 1] + self.drift;
                h = step_volume(h, mu, self.sigma, 1.0, draws.get(t - 1).copied().unwrap_or(0.0));
            }
            path.push(apply_shock(h, t, &self.shocks)?);
        }
        Ok(path)
    }

    /// Samples a path; the normal draws depend only on `seed`, so scenarios
    /// differing only in `sigma` share their noise.
    pub fn sample_path(&self, seed: u64) -> Result<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let draws: Vec<f64> = (1..self.periods().max(1))
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        self.path_from_draws(&draws)
    }

    /// The noise-free path.
    pub fn deterministic_path(&self) -> Result<Vec<f64>> {
        self.path_from_draws(&[])
    }
}

/// Per-period response of the market to a bid level.
#[derive(Debug, Clone)]
pub enum LandscapeProcess {
    Constant(Arc<dyn Response>),
    PerPeriod(Vec<Arc<dyn Response>>),
    /// One response shape whose price axis is rescaled each period.
    Scaled {
        base: Arc<dyn Response>,
        scales: Vec<f64>,
    },
}

impl LandscapeProcess {
    pub fn eval(&self, t: usize, bid: f64) -> ResponsePoint {
        match self {
            LandscapeProcess::Constant(r) => r.eval(bid),
            LandscapeProcess::PerPeriod(v) => v[t.min(v.len() - 1)].eval(bid),
            LandscapeProcess::Scaled { base, scales } => {
                let scale = scales[t.min(scales.len() - 1)];
                ScaledResponse {
                    base: base.clone(),
                    scale,
                }
                .eval(bid)
            }
        }
    }

    pub fn sample_win(&self, t: usize, bid: f64, rng: &mut dyn rand::RngCore) -> Option<f64> {
        match self {
            LandscapeProcess::Constant(r) => r.sample_win(bid, rng),
            LandscapeProcess::PerPeriod(v) => v[t.min(v.len() - 1)].sample_win(bid, rng),
            LandscapeProcess::Scaled { base, scales } => {
                let scale = scales[t.min(scales.len() - 1)];
                base.sample_win(bid / scale, rng).map(|p| p * scale)
            }
        }
    }

    /// Response at one period as a shareable object.
    pub fn at(&self, t: usize) -> Arc<dyn Response> {
        match self {
            LandscapeProcess::Constant(r) => r.clone(),
            LandscapeProcess::PerPeriod(v) => v[t.min(v.len() - 1)].clone(),
            LandscapeProcess::Scaled { base, scales } => Arc::new(ScaledResponse {
                base: base.clone(),
                scale: scales[t.min(scales.len() - 1)],
            }),
        }
    }
}

/// How the market answers a bid level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FeedbackMode {
    /// Expected volume and spend of the (smoothed) response.
    #[default]
    Expected,
    /// Poisson impression counts with per-auction simulated wins.
    Sampled,
}

/// Record of one simulated day.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeTrace {
    pub bids: Vec<f64>,
    pub volumes: Vec<f64>,
    pub spends: Vec<f64>,
    /// Remaining goal at the start of each period.
    pub remaining_goal: Vec<f64>,
    pub goal: f64,
    pub penalty: f64,
    pub final_cost: f64,
}

impl EpisodeTrace {
    pub fn total_volume(&self) -> f64 {
        self.volumes.iter().sum()
    }

    pub fn total_spend(&self) -> f64 {
        self.spends.iter().sum()
    }

    pub fn shortfall(&self) -> f64 {
        (self.goal - self.total_volume()).max(0.0)
    }

    pub fn penalty_paid(&self) -> f64 {
        self.penalty * self.shortfall()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,bid,volume,spend,remaining_goal\n");
        for t in 0..self.bids.len() {
            writeln!(
                out,
                "{t},{},{},{},{}",
                self.bids[t], self.volumes[t], self.spends[t], self.remaining_goal[t]
            )
            .unwrap();
        }
        out.push_str("final_cost,penalty_paid\n");
        writeln!(out, "{},{}", self.final_cost, self.penalty_paid()).unwrap();
        out
    }
}

/// `Σ spend + K · max(0, G − Σ volume)`.
pub fn final_cost(spends: &[f64], volumes: &[f64], goal: f64, penalty: f64) -> f64 {
    let spend: f64 = spends.iter().sum();
    let volume: f64 = volumes.iter().sum();
    spend + penalty * (goal - volume).max(0.0)
}

/// Runs `controller` over a realized intensity path.
pub fn run_on_path<C: Controller + ?Sized>(
    controller: &C,
    intensities: &[f64],
    landscapes: &LandscapeProcess,
    goal: f64,
    penalty: f64,
    mode: FeedbackMode,
    seed: u64,
) -> Result<EpisodeTrace> {
    if !(goal >= 0.0) {
        return Err(invalid(format!("goal must be >= 0, got {goal}")));
    }
    if !(penalty > 0.0) {
        return Err(invalid(format!("penalty must be > 0, got {penalty}")));
    }
    let horizon = intensities.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = controller.init_state();
    let mut trace = EpisodeTrace {
        bids: Vec::with_capacity(horizon),
        volumes: Vec::with_capacity(horizon),
        spends: Vec::with_capacity(horizon),
        remaining_goal: Vec::with_capacity(horizon),
        goal,
        penalty,
        final_cost: 0.0,
    };
    let (mut last_volume, mut last_spend) = (0.0, 0.0);
    let mut remaining = goal;
    for (t, &intensity) in intensities.iter().enumerate() {
        let obs = Observation {
            period: t,
            horizon,
            remaining_goal: remaining,
            last_volume,
            last_spend,
        };
        let bid = controller.act(&mut state, &obs);
        if !bid.is_finite() || bid < 0.0 {
            return Err(Error::InvalidBid { bid, period: t });
        }
        let (volume, spend) = match mode {
            FeedbackMode::Expected => {
                let p = landscapes.eval(t, bid);
                (intensity * p.win, intensity * p.spend)
            }
            FeedbackMode::Sampled => {
                let n = if intensity > 0.0 {
                    Poisson::new(intensity).unwrap().sample(&mut rng) as u64
                } else {
                    0
                };
                let (mut v, mut s) = (0.0, 0.0);
                for _ in 0..n {
                    if let Some(price) = landscapes.sample_win(t, bid, &mut rng) {
                        v += 1.0;
                        s += price;
                    }
                }
                (v, s)
            }
        };
        trace.bids.push(bid);
        trace.volumes.push(volume);
        trace.spends.push(spend);
        trace.remaining_goal.push(remaining);
        remaining -= volume;
        last_volume = volume;
        last_spend = spend;
    }
    trace.final_cost = final_cost(&trace.spends, &trace.volumes, goal, penalty);
    Ok(trace)
}

/// Samples the scenario's path with `seed` and runs the controller over it.
pub fn run_episode<C: Controller + ?Sized>(
    controller: &C,
    scenario: &VolumeScenario,
    landscapes: &LandscapeProcess,
    goal: f64,
    penalty: f64,
    mode: FeedbackMode,
    seed: u64,
) -> Result<EpisodeTrace> {
    let path = scenario.sample_path(seed)?;
    run_on_path(controller, &path, landscapes, goal, penalty, mode, seed.wrapping_add(1 << 32))
}
