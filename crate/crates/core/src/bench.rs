//! Dataset generators and the benchmark experiments.
//!
//! A [`Dataset`] holds base landscapes per placement, realized day paths
//! (intensities and price-level scales) and problem specs that pair a day
//! with a goal. Problem ids encode their split, so overlap between splits is
//! checked by id.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::controllers::{
    fit_reference_curve, AnyController, Controller, GruController, Normalizers, PiController, PiParams,
};
use crate::error::{invalid, parse_err, Error, Result};
use crate::landscape::{
    read_landscape_csv, write_landscape_csv, BidLandscape, BidNoise, PriceGrid, Response, SmoothedLandscape,
};
use crate::market::{EpisodeTrace, LandscapeProcess, Shock, VolumeScenario};
use crate::training::{BiddingProblem, PiScaling};

const SPLIT_STRIDE: u64 = 1 << 40;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Evaluation,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Evaluation];

    fn index(self) -> u64 {
        self as u64
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Evaluation => "evaluation",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| parse_err("split", format!("unknown split {s:?}")))
    }
}

pub fn problem_id(split: Split, index: u64) -> u64 {
    split.index() * SPLIT_STRIDE + index
}

pub fn split_of(id: u64) -> Option<Split> {
    Split::ALL.get((id / SPLIT_STRIDE) as usize).copied()
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of an independent stream derived from a root seed.
pub fn derive_seed(root: u64, stream: u64) -> u64 {
    splitmix(root ^ splitmix(stream))
}

/// Fails if any problem id appears in more than one place.
pub fn check_disjoint(sets: &[&[BiddingProblem]]) -> Result<()> {
    let mut seen = HashSet::new();
    for p in sets.iter().flat_map(|s| s.iter()) {
        if !seen.insert(p.id) {
            return Err(invalid(format!("problem id {} appears in more than one split", p.id)));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitCounts {
    pub train: usize,
    pub validation: usize,
    pub evaluation: usize,
}

impl SplitCounts {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Validation => self.validation,
            Split::Evaluation => self.evaluation,
        }
    }
}

/// Simulated market: one log-normal landscape and a linear base volume curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulatedConfig {
    pub horizon: usize,
    pub base_start: f64,
    pub base_end: f64,
    pub goal: f64,
    pub penalty: f64,
    pub price_median: f64,
    pub price_log_sd: f64,
    pub noise: BidNoise,
    pub shock_start: usize,
}

impl Default for SimulatedConfig {
    fn default() -> Self {
        Self {
            horizon: 100,
            base_start: 100.0,
            base_end: 100.0,
            goal: 100.0,
            penalty: 5.0,
            price_median: 5.0,
            price_log_sd: 1.0,
            noise: BidNoise::Gamma { shape: 4.0 },
            shock_start: 65,
        }
    }
}

impl SimulatedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(invalid("horizon must be >= 1"));
        }
        if !(self.base_start >= 0.0) || !(self.base_end >= 0.0) {
            return Err(invalid("base volume curve must be >= 0"));
        }
        if !(self.goal > 0.0) || !(self.penalty > 0.0) {
            return Err(invalid("goal and penalty must be > 0"));
        }
        if !(self.price_median > 0.0) || !(self.price_log_sd > 0.0) {
            return Err(invalid("price median and log-sd must be > 0"));
        }
        self.noise.validate()
    }

    pub fn scenario(&self, sigma: f64) -> VolumeScenario {
        VolumeScenario::linear(self.base_start, self.base_end, self.horizon).with_sigma(sigma)
    }

    pub fn landscape(&self) -> Result<BidLandscape> {
        BidLandscape::lognormal(Arc::new(PriceGrid::standard()), self.price_median, self.price_log_sd)
    }

    pub fn response(&self) -> Result<Arc<dyn Response>> {
        Ok(Arc::new(SmoothedLandscape::new(Arc::new(self.landscape()?), self.noise)?))
    }

    /// Evaluation problem on the noise-free base path with a permanent shock.
    pub fn shock_problem(&self, response: &Arc<dyn Response>, factor: f64, id: u64) -> Result<BiddingProblem> {
        let scenario = self.scenario(0.0).with_shock(self.shock_start, factor);
        Ok(BiddingProblem {
            id,
            intensities: scenario.deterministic_path()?,
            landscapes: LandscapeProcess::Constant(response.clone()),
            goal: self.goal,
            penalty: self.penalty,
        })
    }

    /// Problems on noisy paths for one split, built in memory.
    pub fn problems(
        &self,
        response: &Arc<dyn Response>,
        sigma: f64,
        split: Split,
        n: usize,
        seed: u64,
    ) -> Result<Vec<BiddingProblem>> {
        self.validate()?;
        let scenario = self.scenario(sigma);
        scenario.validate()?;
        (0..n as u64)
            .map(|i| {
                let id = problem_id(split, i);
                Ok(BiddingProblem {
                    id,
                    intensities: scenario.sample_path(derive_seed(seed, id))?,
                    landscapes: LandscapeProcess::Constant(response.clone()),
                    goal: self.goal,
                    penalty: self.penalty,
                })
            })
            .collect()
    }
}

/// Production-like market: many placements with seasonal volume and price
/// levels, daily noise and occasional volume shocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProductionConfig {
    pub placements: usize,
    pub train_days: usize,
    pub validation_days: usize,
    pub evaluation_days: usize,
    pub horizon: usize,
    pub goal_min: f64,
    pub goal_max: f64,
    pub penalty: f64,
    pub noise: BidNoise,
    /// Daily available volume is log-uniform on this range.
    pub daily_volume_min: f64,
    pub daily_volume_max: f64,
    /// Random-walk volatility as a fraction of the mean per-period volume.
    pub volatility: f64,
    pub shock_probability: f64,
    pub problems: SplitCounts,
}

impl Default for ProductionConfig {
    fn default() -> Self {
        Self {
            placements: 100,
            train_days: 40,
            validation_days: 5,
            evaluation_days: 10,
            horizon: 288,
            goal_min: 10.0,
            goal_max: 1000.0,
            penalty: 5.0,
            noise: BidNoise::Gamma { shape: 4.0 },
            daily_volume_min: 3000.0,
            daily_volume_max: 30000.0,
            volatility: 0.02,
            shock_probability: 0.15,
            problems: SplitCounts {
                train: 20_000,
                validation: 200,
                evaluation: 500,
            },
        }
    }
}

impl ProductionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.placements == 0 {
            return Err(invalid("placements must be >= 1"));
        }
        if self.train_days == 0 || self.validation_days == 0 || self.evaluation_days == 0 {
            return Err(invalid("each split needs at least one day"));
        }
        if self.horizon == 0 {
            return Err(invalid("horizon must be >= 1"));
        }
        if !(self.goal_min > 0.0) || !(self.goal_max >= self.goal_min) {
            return Err(invalid("need 0 < goal_min <= goal_max"));
        }
        if !(self.daily_volume_min > 0.0) || !(self.daily_volume_max >= self.daily_volume_min) {
            return Err(invalid("need 0 < daily_volume_min <= daily_volume_max"));
        }
        if self.goal_max > self.daily_volume_min {
            return Err(invalid(format!(
                "goal_max {} exceeds the smallest daily volume {}",
                self.goal_max, self.daily_volume_min
            )));
        }
        if !(self.penalty > 0.0) || !(self.volatility >= 0.0) {
            return Err(invalid("need penalty > 0 and volatility >= 0"));
        }
        if !(0.0..=1.0).contains(&self.shock_probability) {
            return Err(invalid("shock_probability must lie in [0, 1]"));
        }
        self.noise.validate()
    }

    fn days(&self, split: Split) -> std::ops::Range<usize> {
        let (a, b) = (self.train_days, self.validation_days);
        match split {
            Split::Train => 0..a,
            Split::Validation => a..a + b,
            Split::Evaluation => a + b..a + b + self.evaluation_days,
        }
    }

    fn total_days(&self) -> usize {
        self.train_days + self.validation_days + self.evaluation_days
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DayPath {
    pub placement: usize,
    pub intensities: Vec<f64>,
    pub price_scales: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProblemSpec {
    pub id: u64,
    pub day: usize,
    pub goal: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub name: String,
    pub horizon: usize,
    pub penalty: f64,
    pub noise: BidNoise,
    pub seed: u64,
    pub generator: serde_json::Value,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub grid: Arc<PriceGrid>,
    pub placements: Vec<BidLandscape>,
    pub days: Vec<DayPath>,
    pub problems: Vec<ProblemSpec>,
}

/// Problems of a dataset, grouped by split.
#[derive(Debug, Clone)]
pub struct SplitProblems {
    pub train: Vec<BiddingProblem>,
    pub validation: Vec<BiddingProblem>,
    pub evaluation: Vec<BiddingProblem>,
}

impl Dataset {
    pub fn validate(&self) -> Result<()> {
        let t = self.meta.horizon;
        if !(self.meta.penalty > 0.0) {
            return Err(invalid("dataset penalty must be > 0"));
        }
        for (i, d) in self.days.iter().enumerate() {
            if d.placement >= self.placements.len() {
                return Err(invalid(format!("day {i} refers to missing placement {}", d.placement)));
            }
            if d.intensities.len() != t || d.price_scales.len() != t {
                return Err(Error::ShapeMismatch(format!("day {i} does not have {t} periods")));
            }
            if d.intensities.iter().any(|v| !(*v >= 0.0)) || d.price_scales.iter().any(|v| !(*v > 0.0)) {
                return Err(invalid(format!("day {i} has negative volume or non-positive price scale")));
            }
        }
        let mut seen = HashSet::new();
        for p in &self.problems {
            if !seen.insert(p.id) {
                return Err(invalid(format!("duplicate problem id {}", p.id)));
            }
            if split_of(p.id).is_none() {
                return Err(invalid(format!("problem id {} has no split", p.id)));
            }
            if p.day >= self.days.len() {
                return Err(invalid(format!("problem {} refers to missing day {}", p.id, p.day)));
            }
            if !(p.goal > 0.0) {
                return Err(invalid(format!("problem {} has goal {}", p.id, p.goal)));
            }
        }
        Ok(())
    }

    pub fn count(&self, split: Split) -> usize {
        self.problems.iter().filter(|p| split_of(p.id) == Some(split)).count()
    }

    /// Materializes all problems with one smoothed response per placement.
    pub fn split_problems(&self) -> Result<SplitProblems> {
        self.validate()?;
        let responses = self
            .placements
            .par_iter()
            .map(|l| {
                let r: Arc<dyn Response> = Arc::new(SmoothedLandscape::new(Arc::new(l.clone()), self.meta.noise)?);
                Ok(r)
            })
            .collect::<Result<Vec<_>>>()?;
        let build = |split: Split| -> Vec<BiddingProblem> {
            self.problems
                .iter()
                .filter(|p| split_of(p.id) == Some(split))
                .map(|p| {
                    let day = &self.days[p.day];
                    let base = responses[day.placement].clone();
                    let landscapes = if day.price_scales.iter().all(|s| *s == 1.0) {
                        LandscapeProcess::Constant(base)
                    } else {
                        LandscapeProcess::Scaled {
                            base,
                            scales: day.price_scales.clone(),
                        }
                    };
                    BiddingProblem {
                        id: p.id,
                        intensities: day.intensities.clone(),
                        landscapes,
                        goal: p.goal,
                        penalty: self.meta.penalty,
                    }
                })
                .collect()
        };
        let out = SplitProblems {
            train: build(Split::Train),
            validation: build(Split::Validation),
            evaluation: build(Split::Evaluation),
        };
        check_disjoint(&[&out.train, &out.validation, &out.evaluation])?;
        Ok(out)
    }

    /// Writes `dataset.json`, `landscapes.csv` (one row per placement),
    /// `days.csv` and `problems.csv`. Returns the file names written.
    pub fn write_dir(&self, dir: &Path) -> Result<Vec<String>> {
        self.validate()?;
        fs::create_dir_all(dir)?;
        let mut files = Vec::new();
        let mut put = |name: &str, text: String| -> Result<()> {
            fs::write(dir.join(name), text)?;
            files.push(name.to_string());
            Ok(())
        };
        put(
            "dataset.json",
            serde_json::to_string_pretty(&self.meta).map_err(|e| Error::Config(e.to_string()))? + "\n",
        )?;
        put("landscapes.csv", write_landscape_csv(&self.grid, &self.placements))?;
        let mut days = String::from("day,placement,series,values\n");
        for (i, d) in self.days.iter().enumerate() {
            for (series, vals) in [("intensity", &d.intensities), ("price_scale", &d.price_scales)] {
                write!(days, "{i},{},{series}", d.placement).unwrap();
                for v in vals {
                    write!(days, ",{v}").unwrap();
                }
                days.push('\n');
            }
        }
        put("days.csv", days)?;
        let mut probs = String::from("id,split,day,goal\n");
        for p in &self.problems {
            let split = split_of(p.id).expect("validated id");
            writeln!(probs, "{},{},{},{}", p.id, split.name(), p.day, p.goal).unwrap();
        }
        put("problems.csv", probs)?;
        Ok(files)
    }

    pub fn read_dir(dir: &Path) -> Result<Self> {
        let read = |name: &str| -> Result<String> {
            let path = dir.join(name);
            if !path.exists() {
                return Err(Error::Missing(path));
            }
            Ok(fs::read_to_string(path)?)
        };
        let meta: DatasetMeta = serde_json::from_str(&read("dataset.json")?)
            .map_err(|e| parse_err("dataset.json", e.to_string()))?;
        let (grid, placements) = read_landscape_csv(&read("landscapes.csv")?)?;
        let ctx = "days.csv";
        let text = read("days.csv")?;
        let mut days: Vec<DayPath> = Vec::new();
        for (row, line) in text.lines().skip(1).filter(|l| !l.is_empty()).enumerate() {
            let mut f = line.split(',');
            let mut next = |what: &str| {
                f.next()
                    .map(str::to_string)
                    .ok_or_else(|| parse_err(ctx, format!("row {row}: missing {what}")))
            };
            let day: usize = next("day")?.parse().map_err(|e| parse_err(ctx, format!("row {row}: {e}")))?;
            let placement: usize = next("placement")?
                .parse()
                .map_err(|e| parse_err(ctx, format!("row {row}: {e}")))?;
            let series = next("series")?;
            let vals = f
                .map(|v| v.parse::<f64>().map_err(|e| parse_err(ctx, format!("row {row}: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            if day == days.len() {
                days.push(DayPath {
                    placement,
                    intensities: Vec::new(),
                    price_scales: Vec::new(),
                });
            } else if day + 1 != days.len() || days[day].placement != placement {
                return Err(parse_err(ctx, format!("row {row}: day {day} out of order")));
            }
            match series.as_str() {
                "intensity" => days[day].intensities = vals,
                "price_scale" => days[day].price_scales = vals,
                other => return Err(parse_err(ctx, format!("row {row}: unknown series {other:?}"))),
            }
        }
        let ctx = "problems.csv";
        let mut problems = Vec::new();
        for (row, line) in read("problems.csv")?.lines().skip(1).filter(|l| !l.is_empty()).enumerate() {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(parse_err(ctx, format!("row {row}: expected 4 fields")));
            }
            let err = |e: String| parse_err(ctx, format!("row {row}: {e}"));
            let id: u64 = f[0].parse().map_err(|e| err(format!("{e}")))?;
            if split_of(id) != Some(Split::parse(f[1])?) {
                return Err(err(format!("id {id} does not belong to split {}", f[1])));
            }
            problems.push(ProblemSpec {
                id,
                day: f[2].parse().map_err(|e| err(format!("{e}")))?,
                goal: f[3].parse().map_err(|e| err(format!("{e}")))?,
            });
        }
        let ds = Dataset {
            meta,
            grid,
            placements,
            days,
            problems,
        };
        ds.validate()?;
        Ok(ds)
    }
}

/// Simulated dataset: every problem is a fresh noisy path of the base curve.
pub fn gen_simulated_dataset(cfg: &SimulatedConfig, sigma: f64, counts: SplitCounts, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let scenario = cfg.scenario(sigma);
    scenario.validate()?;
    let landscape = cfg.landscape()?;
    let mut days = Vec::new();
    let mut problems = Vec::new();
    for split in Split::ALL {
        for i in 0..counts.get(split) as u64 {
            let id = problem_id(split, i);
            problems.push(ProblemSpec {
                id,
                day: days.len(),
                goal: cfg.goal,
            });
            days.push(DayPath {
                placement: 0,
                intensities: scenario.sample_path(derive_seed(seed, id))?,
                price_scales: vec![1.0; cfg.horizon],
            });
        }
    }
    Ok(Dataset {
        meta: DatasetMeta {
            name: "simulated".into(),
            horizon: cfg.horizon,
            penalty: cfg.penalty,
            noise: cfg.noise,
            seed,
            generator: serde_json::json!({ "simulated": cfg, "sigma": sigma, "counts": counts }),
        },
        grid: landscape.grid().clone(),
        placements: vec![landscape],
        days,
        problems,
    })
}

/// Two-harmonic daily shape with unit mean.
fn seasonal(t: usize, horizon: usize, a1: f64, p1: f64, a2: f64, p2: f64) -> f64 {
    let x = 2.0 * std::f64::consts::PI * t as f64 / horizon as f64;
    1.0 + a1 * (x - p1).cos() + a2 * (2.0 * x - p2).cos()
}

/// Production-like dataset with disjoint day ranges per split.
pub fn gen_production_like_dataset(cfg: &ProductionConfig, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let grid = Arc::new(PriceGrid::standard());
    let horizon = cfg.horizon;
    let n_days = cfg.total_days();
    let mut placements = Vec::with_capacity(cfg.placements);
    let mut days = Vec::with_capacity(cfg.placements * n_days);
    for p in 0..cfg.placements {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, (1 << 62) | p as u64));
        let z: f64 = StandardNormal.sample(&mut rng);
        let median = (0.4 * z).exp();
        let log_sd = rng.gen_range(0.5..1.0);
        placements.push(BidLandscape::lognormal(grid.clone(), median, log_sd)?);
        let (lo, hi) = (cfg.daily_volume_min.ln(), cfg.daily_volume_max.ln());
        let daily = rng.gen_range(lo..=hi).exp();
        let (a1, p1) = (rng.gen_range(0.3..0.6), rng.gen_range(2.5..3.8));
        let (a2, p2) = (rng.gen_range(0.0..0.2), rng.gen_range(0.0..std::f64::consts::TAU));
        let (price_amp, price_phase) = (rng.gen_range(0.05..0.2), rng.gen_range(0.0..std::f64::consts::TAU));
        let per_period = daily / horizon as f64;
        for d in 0..n_days {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, ((p as u64) << 24) | d as u64));
            let zl: f64 = StandardNormal.sample(&mut rng);
            let zp: f64 = StandardNormal.sample(&mut rng);
            let level = (0.15 * zl).exp();
            let price_level = (0.1 * zp).exp();
            let base: Vec<f64> = (0..horizon)
                .map(|t| per_period * level * seasonal(t, horizon, a1, p1, a2, p2))
                .collect();
            let mut scenario = VolumeScenario::from_curve(base).with_sigma(cfg.volatility * per_period);
            if rng.gen::<f64>() < cfg.shock_probability {
                scenario.shocks.push(Shock {
                    start: rng.gen_range(horizon / 3..horizon),
                    factor: rng.gen_range(1.5..3.0),
                });
            }
            let intensities = scenario.sample_path(rng.gen())?;
            let price_scales = (0..horizon)
                .map(|t| {
                    let x = std::f64::consts::TAU * t as f64 / horizon as f64;
                    price_level * (price_amp * (x - price_phase).cos()).exp()
                })
                .collect();
            days.push(DayPath {
                placement: p,
                intensities,
                price_scales,
            });
        }
    }
    let mut problems = Vec::new();
    for split in Split::ALL {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, (2 << 62) | split.index()));
        let range = cfg.days(split);
        for i in 0..cfg.problems.get(split) as u64 {
            let p = rng.gen_range(0..cfg.placements);
            let d = rng.gen_range(range.clone());
            problems.push(ProblemSpec {
                id: problem_id(split, i),
                day: p * n_days + d,
                goal: rng.gen_range(cfg.goal_min..=cfg.goal_max),
            });
        }
    }
    Ok(Dataset {
        meta: DatasetMeta {
            name: "production-like".into(),
            horizon,
            penalty: cfg.penalty,
            noise: cfg.noise,
            seed,
            generator: serde_json::json!({ "production": cfg }),
        },
        grid,
        placements,
        days,
        problems,
    })
}

/// Input scales for a GRU trained on `problems`: the mean per-period won
/// volume of an on-pace campaign (goal over horizon) and the mean price paid
/// when bidding the penalty level.
pub fn normalizers_for(problems: &[BiddingProblem]) -> Result<Normalizers> {
    if problems.is_empty() {
        return Err(invalid("cannot derive normalizers from no problems"));
    }
    let volume = problems.iter().map(|p| p.goal / p.horizon() as f64).sum::<f64>() / problems.len() as f64;
    let sample = &problems[..problems.len().min(200)];
    let mut price = 0.0;
    let mut n = 0usize;
    for p in sample {
        for t in (0..p.horizon()).step_by((p.horizon() / 8).max(1)) {
            let r = p.landscapes.eval(t, p.penalty);
            if r.win > 0.0 {
                price += r.spend / r.win;
                n += 1;
            }
        }
    }
    let price = if n > 0 { price / n as f64 } else { 1.0 };
    if !(volume > 0.0) {
        return Err(invalid("mean per-period goal must be > 0"));
    }
    Ok(Normalizers { volume, price })
}

/// Initial PI controller for a training set: a reference curve fitted to the
/// training intensities and gains `theta · K / v̄`, with `v̄` the mean
/// per-period goal.
pub fn pi_setup(problems: &[BiddingProblem], penalty: f64, theta: [f64; 2]) -> Result<(PiController, PiScaling)> {
    let curves: Vec<Vec<f64>> = problems.iter().map(|p| p.intensities.clone()).collect();
    let reference = fit_reference_curve(&curves)?;
    let per_period = problems.iter().map(|p| p.goal / p.horizon() as f64).sum::<f64>() / problems.len() as f64;
    if !(per_period > 0.0) {
        return Err(invalid("mean per-period goal must be > 0"));
    }
    let scaling = PiScaling {
        gain_unit: penalty / per_period,
    };
    let pi = PiController::new(
        PiParams {
            kp: theta[0] * scaling.gain_unit,
            ki: theta[1] * scaling.gain_unit,
            reference,
        },
        penalty,
    )?;
    Ok((pi, scaling))
}

/// One line of a report CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub experiment: String,
    pub cell: String,
    pub mean_cost: f64,
    pub std_cost: f64,
    pub shortfall_prob: f64,
    pub mean_spend: f64,
    pub mean_penalty: f64,
    pub n: usize,
}

/// Mean and sample standard deviation of final costs, shortfall frequency
/// and the spend/penalty split.
pub fn metrics(experiment: &str, cell: &str, traces: &[EpisodeTrace]) -> Result<ReportRow> {
    if traces.is_empty() {
        return Err(invalid(format!("no traces for {experiment}/{cell}")));
    }
    let n = traces.len() as f64;
    let costs: Vec<f64> = traces.iter().map(|t| t.final_cost).collect();
    let mean = costs.iter().sum::<f64>() / n;
    let std = if traces.len() > 1 {
        (costs.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    let short = traces.iter().filter(|t| t.total_volume() < t.goal).count() as f64 / n;
    let spend = traces.iter().map(|t| t.total_spend()).sum::<f64>() / n;
    let penalty = traces.iter().map(|t| t.penalty_paid()).sum::<f64>() / n;
    Ok(ReportRow {
        experiment: experiment.into(),
        cell: cell.into(),
        mean_cost: mean,
        std_cost: std,
        shortfall_prob: short,
        mean_spend: spend,
        mean_penalty: penalty,
        n: traces.len(),
    })
}

pub fn report_csv(rows: &[ReportRow]) -> String {
    let mut s = String::from("experiment,cell,mean_cost,std_cost,shortfall_prob,mean_spend,mean_penalty,n\n");
    for r in rows {
        writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.experiment, r.cell, r.mean_cost, r.std_cost, r.shortfall_prob, r.mean_spend, r.mean_penalty, r.n
        )
        .unwrap();
    }
    s
}

/// Percentile bootstrap interval of `stat` over index resamples of `0..n`.
pub fn bootstrap_ci<F>(n: usize, stat: F, resamples: usize, level: f64, seed: u64) -> Result<(f64, f64)>
where
    F: Fn(&[usize]) -> f64,
{
    if n == 0 || resamples == 0 {
        return Err(invalid("bootstrap needs samples and resamples"));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(invalid(format!("confidence level must lie in (0, 1), got {level}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = vec![0usize; n];
    let mut stats: Vec<f64> = (0..resamples)
        .map(|_| {
            for i in idx.iter_mut() {
                *i = rng.gen_range(0..n);
            }
            stat(&idx)
        })
        .collect();
    stats.sort_by(f64::total_cmp);
    let q = |p: f64| stats[((p * resamples as f64).floor() as usize).min(resamples - 1)];
    let tail = (1.0 - level) / 2.0;
    Ok((q(tail), q(1.0 - tail)))
}

/// Interval for the mean of paired differences `a[i] − b[i]`.
pub fn paired_mean_diff_ci(a: &[f64], b: &[f64], resamples: usize, seed: u64) -> Result<(f64, f64)> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!("paired samples of sizes {} and {}", a.len(), b.len())));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    bootstrap_ci(d.len(), |ix| ix.iter().map(|&i| d[i]).sum::<f64>() / ix.len() as f64, resamples, 0.95, seed)
}

fn evaluate_all<C: Controller + Sync + ?Sized>(c: &C, problems: &[BiddingProblem]) -> Result<Vec<EpisodeTrace>> {
    problems.par_iter().map(|p| p.evaluate(c)).collect()
}

/// Models of the shock grid, keyed by the training noise level.
pub type NoiseModels<'a> = [(f64, &'a AnyController)];

#[derive(Debug, Clone)]
pub struct ShockCell {
    pub sigma: f64,
    pub factor: f64,
    pub trace: EpisodeTrace,
}

impl ShockCell {
    pub fn name(&self) -> String {
        format!("sigma={}/shock={}", self.sigma, self.factor)
    }
}

#[derive(Debug, Clone)]
pub struct ShockGridReport {
    pub rows: Vec<ReportRow>,
    pub cells: Vec<ShockCell>,
}

impl ShockGridReport {
    pub fn cell(&self, sigma: f64, factor: f64) -> Option<&ShockCell> {
        self.cells.iter().find(|c| c.sigma == sigma && c.factor == factor)
    }
}

/// Evaluates every model on the noise-free base path under each permanent
/// shock factor.
pub fn experiment_shock_grid(models: &NoiseModels, cfg: &SimulatedConfig, factors: &[f64]) -> Result<ShockGridReport> {
    if models.is_empty() {
        return Err(Error::Missing("shock-grid models".into()));
    }
    let response = cfg.response()?;
    let problems = factors
        .iter()
        .enumerate()
        .map(|(i, &f)| cfg.shock_problem(&response, f, problem_id(Split::Evaluation, i as u64)))
        .collect::<Result<Vec<_>>>()?;
    let jobs: Vec<(f64, &AnyController, f64, &BiddingProblem)> = models
        .iter()
        .flat_map(|&(s, m)| factors.iter().zip(&problems).map(move |(&f, p)| (s, m, f, p)))
        .collect();
    let cells = jobs
        .par_iter()
        .map(|&(sigma, m, factor, p)| {
            Ok(ShockCell {
                sigma,
                factor,
                trace: p.evaluate(m)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let rows = cells
        .iter()
        .map(|c| metrics("shock-grid", &c.name(), std::slice::from_ref(&c.trace)))
        .collect::<Result<Vec<_>>>()?;
    Ok(ShockGridReport { rows, cells })
}

#[derive(Debug, Clone)]
pub struct NoiseCrossCell {
    pub train_sigma: f64,
    pub eval_sigma: f64,
    pub costs: Vec<f64>,
    pub shortfall: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct NoiseCrossReport {
    pub rows: Vec<ReportRow>,
    pub cells: Vec<NoiseCrossCell>,
}

impl NoiseCrossReport {
    pub fn cell(&self, train_sigma: f64, eval_sigma: f64) -> Option<&NoiseCrossCell> {
        self.cells
            .iter()
            .find(|c| c.train_sigma == train_sigma && c.eval_sigma == eval_sigma)
    }
}

/// Evaluates each model on `n_eval` paths per evaluation noise level. Paths
/// share their normal draws across levels.
pub fn experiment_noise_cross(
    models: &NoiseModels,
    eval_sigmas: &[f64],
    cfg: &SimulatedConfig,
    n_eval: usize,
    seed: u64,
) -> Result<NoiseCrossReport> {
    if models.is_empty() || eval_sigmas.is_empty() || n_eval == 0 {
        return Err(invalid("noise-cross needs models, evaluation levels and episodes"));
    }
    let response = cfg.response()?;
    let mut rows = Vec::new();
    let mut cells = Vec::new();
    for &es in eval_sigmas {
        let problems = cfg.problems(&response, es, Split::Evaluation, n_eval, seed)?;
        for &(ts, m) in models {
            let traces = evaluate_all(m, &problems)?;
            let cell = format!("train={ts}/eval={es}");
            rows.push(metrics("noise-cross", &cell, &traces)?);
            cells.push(NoiseCrossCell {
                train_sigma: ts,
                eval_sigma: es,
                costs: traces.iter().map(|t| t.final_cost).collect(),
                shortfall: traces.iter().map(|t| t.total_volume() < t.goal).collect(),
            });
        }
    }
    Ok(NoiseCrossReport { rows, cells })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BucketComparison {
    pub goal: f64,
    /// Mean cost per thousand goal impressions.
    pub pi_cpm: f64,
    pub rnn_cpm: f64,
    pub ratio: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n: usize,
}

#[derive(Debug, Clone)]
pub struct PiVsRnnReport {
    pub rows: Vec<ReportRow>,
    pub buckets: Vec<BucketComparison>,
}

pub fn buckets_csv(b: &[BucketComparison]) -> String {
    let mut s = String::from("goal,pi_cpm,rnn_cpm,ratio,ci_low,ci_high,n\n");
    for r in b {
        writeln!(s, "{},{},{},{},{},{},{}", r.goal, r.pi_cpm, r.rnn_cpm, r.ratio, r.ci_low, r.ci_high, r.n).unwrap();
    }
    s
}

/// Compares two controllers on the evaluation problems with each goal set to
/// every bucket value. The ratio interval comes from a paired bootstrap.
pub fn experiment_pi_vs_rnn(
    pi: &AnyController,
    rnn: &AnyController,
    problems: &[BiddingProblem],
    buckets: &[f64],
    resamples: usize,
    seed: u64,
) -> Result<PiVsRnnReport> {
    if problems.is_empty() || buckets.is_empty() {
        return Err(invalid("pi-vs-rnn needs evaluation problems and goal buckets"));
    }
    let mut rows = Vec::new();
    let mut out = Vec::new();
    for (k, &goal) in buckets.iter().enumerate() {
        if !(goal > 0.0) {
            return Err(invalid(format!("goal bucket must be > 0, got {goal}")));
        }
        let set: Vec<BiddingProblem> = problems.iter().map(|p| BiddingProblem { goal, ..p.clone() }).collect();
        let tp = evaluate_all(pi, &set)?;
        let tr = evaluate_all(rnn, &set)?;
        rows.push(metrics("pi-vs-rnn", &format!("pi/goal={goal}"), &tp)?);
        rows.push(metrics("pi-vs-rnn", &format!("rnn/goal={goal}"), &tr)?);
        let a: Vec<f64> = tp.iter().map(|t| t.final_cost).collect();
        let b: Vec<f64> = tr.iter().map(|t| t.final_cost).collect();
        let ratio_of = |ix: &[usize]| {
            let (sa, sb) = ix.iter().fold((0.0, 0.0), |(x, y), &i| (x + a[i], y + b[i]));
            sb / sa
        };
        let all: Vec<usize> = (0..a.len()).collect();
        let (ci_low, ci_high) = bootstrap_ci(a.len(), ratio_of, resamples, 0.95, derive_seed(seed, k as u64))?;
        let cpm = |v: &[f64]| 1000.0 * v.iter().sum::<f64>() / v.len() as f64 / goal;
        out.push(BucketComparison {
            goal,
            pi_cpm: cpm(&a),
            rnn_cpm: cpm(&b),
            ratio: ratio_of(&all),
            ci_low,
            ci_high,
            n: a.len(),
        });
    }
    Ok(PiVsRnnReport { rows, buckets: out })
}

/// Flatness of a bid trajectory: `(max − min) / mean`.
pub fn relative_spread(bids: &[f64]) -> f64 {
    let max = bids.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = bids.iter().copied().fold(f64::INFINITY, f64::min);
    let mean = bids.iter().sum::<f64>() / bids.len() as f64;
    (max - min) / mean
}

/// Fresh GRU for a training set.
pub fn init_gru(problems: &[BiddingProblem], penalty: f64, seed: u64) -> Result<GruController> {
    GruController::init(crate::controllers::GRU_HIDDEN, penalty, normalizers_for(problems)?, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::controllers::ConstantBid;
    use crate::market::FeedbackMode;
    use proptest::prelude::*;
    use rand::Rng;

    fn small_sim() -> SimulatedConfig {
        SimulatedConfig {
            horizon: 30,
            ..Default::default()
        }
    }

    #[test]
    fn ids_encode_splits() {
        for s in Split::ALL {
            assert_eq!(split_of(problem_id(s, 12345)), Some(s));
            assert_eq!(Split::parse(s.name()).unwrap(), s);
        }
        assert!(Split::parse("test").is_err());
    }

    #[test]
    fn zero_sigma_shares_the_base_path() {
        let counts = SplitCounts {
            train: 5,
            validation: 2,
            evaluation: 2,
        };
        let ds = gen_simulated_dataset(&small_sim(), 0.0, counts, 3).unwrap();
        let base = small_sim().scenario(0.0).deterministic_path().unwrap();
        assert!(ds.days.iter().all(|d| d.intensities == base));
        let sp = ds.split_problems().unwrap();
        assert_eq!((sp.train.len(), sp.validation.len(), sp.evaluation.len()), (5, 2, 2));
    }

    #[test]
    fn seeds_change_paths() {
        let counts = SplitCounts {
            train: 3,
            validation: 1,
            evaluation: 1,
        };
        let a = gen_simulated_dataset(&small_sim(), 1.0, counts, 1).unwrap();
        let b = gen_simulated_dataset(&small_sim(), 1.0, counts, 2).unwrap();
        assert_ne!(a.days[0].intensities, b.days[0].intensities);
        assert_ne!(a.days[0].intensities, a.days[1].intensities);
    }

    #[test]
    fn random_walk_variance_grows_linearly() {
        // Level far from zero so the clamp never binds.
        let cfg = SimulatedConfig {
            horizon: 50,
            base_start: 1000.0,
            base_end: 1000.0,
            ..Default::default()
        };
        let resp = cfg.response().unwrap();
        let sigma = 2.0;
        let ps = cfg.problems(&resp, sigma, Split::Train, 4000, 5).unwrap();
        for t in [10usize, 25, 49] {
            let xs: Vec<f64> = ps.iter().map(|p| p.intensities[t]).collect();
            let m = xs.iter().sum::<f64>() / xs.len() as f64;
            let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
            let want = sigma * sigma * t as f64;
            // Sample variance has relative sd sqrt(2/(n-1)).
            let tol = 4.0 * want * (2.0 / 3999.0f64).sqrt();
            assert!((v - want).abs() < tol, "t={t} var {v} want {want}");
        }
    }

    fn tiny_production() -> ProductionConfig {
        ProductionConfig {
            placements: 4,
            train_days: 3,
            validation_days: 1,
            evaluation_days: 2,
            horizon: 288,
            problems: SplitCounts {
                train: 50,
                validation: 10,
                evaluation: 10,
            },
            ..Default::default()
        }
    }

    #[test]
    fn production_like_shape() {
        let cfg = tiny_production();
        let ds = gen_production_like_dataset(&cfg, 7).unwrap();
        assert_eq!(ds.meta.horizon, 288);
        ds.validate().unwrap();
        for p in &ds.problems {
            assert!((10.0..=1000.0).contains(&p.goal));
            let day_in_placement = p.day % cfg.total_days();
            let split = split_of(p.id).unwrap();
            assert!(cfg.days(split).contains(&day_in_placement));
        }
        for l in &ds.placements {
            let c = l.cdf();
            assert!(c.windows(2).all(|w| w[0] <= w[1]));
            assert_eq!(*c.last().unwrap(), 1.0);
            assert!(c[0] >= 0.0);
        }
        let sp = ds.split_problems().unwrap();
        assert!(sp.train.iter().all(|p| p.horizon() == 288));
    }

    #[test]
    fn goals_are_uniform() {
        let cfg = ProductionConfig {
            problems: SplitCounts {
                train: 20_000,
                validation: 1,
                evaluation: 1,
            },
            ..tiny_production()
        };
        let ds = gen_production_like_dataset(&cfg, 5).unwrap();
        let goals: Vec<f64> = ds.problems.iter().filter(|p| split_of(p.id) == Some(Split::Train)).map(|p| p.goal).collect();
        // Kolmogorov-Smirnov distance against U[10, 1000]; 1.63/sqrt(n) is the 1% critical value.
        let mut g = goals.clone();
        g.sort_by(f64::total_cmp);
        let n = g.len() as f64;
        let d = g
            .iter()
            .enumerate()
            .map(|(i, x)| {
                let f = (x - 10.0) / 990.0;
                (f - i as f64 / n).abs().max((f - (i + 1) as f64 / n).abs())
            })
            .fold(0.0, f64::max);
        assert!(d < 1.63 / n.sqrt(), "KS distance {d}");
    }

    #[test]
    fn dataset_round_trips_through_files() {
        let ds = gen_production_like_dataset(&tiny_production(), 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.write_dir(dir.path()).unwrap();
        let back = Dataset::read_dir(dir.path()).unwrap();
        assert_eq!(back.meta, ds.meta);
        assert_eq!(back.days, ds.days);
        assert_eq!(back.problems, ds.problems);
        for (a, b) in back.placements.iter().zip(&ds.placements) {
            for (x, y) in a.cdf().iter().zip(b.cdf()) {
                assert_eq!(x, y);
            }
        }
        assert!(matches!(Dataset::read_dir(&dir.path().join("nope")), Err(Error::Missing(_))));
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = tiny_production();
        c.placements = 0;
        assert!(gen_production_like_dataset(&c, 0).is_err());
        let mut c = tiny_production();
        c.goal_max = 1e6;
        assert!(c.validate().is_err());
        let c = SimulatedConfig {
            goal: 0.0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn disjoint_check() {
        let resp = small_sim().response().unwrap();
        let a = small_sim().problems(&resp, 1.0, Split::Train, 3, 0).unwrap();
        let b = small_sim().problems(&resp, 1.0, Split::Validation, 3, 0).unwrap();
        check_disjoint(&[&a, &b]).unwrap();
        assert!(check_disjoint(&[&a, &a]).is_err());
    }

    fn trace(goal: f64, vols: &[f64], spends: &[f64]) -> EpisodeTrace {
        let k = 2.0;
        EpisodeTrace {
            bids: vec![1.0; vols.len()],
            volumes: vols.to_vec(),
            spends: spends.to_vec(),
            remaining_goal: vec![goal; vols.len()],
            goal,
            penalty: k,
            final_cost: crate::market::final_cost(spends, vols, goal, k),
        }
    }

    #[test]
    fn metrics_examples() {
        let met = [trace(3.0, &[2.0, 2.0], &[1.0, 1.0]), trace(1.0, &[1.0, 0.5], &[0.5, 0.5])];
        let r = metrics("x", "y", &met).unwrap();
        assert_eq!(r.shortfall_prob, 0.0);
        let missed = [trace(10.0, &[2.0], &[1.0]), trace(10.0, &[1.0], &[0.5])];
        let r = metrics("x", "y", &missed).unwrap();
        assert_eq!(r.shortfall_prob, 1.0);
        assert!((r.mean_cost - (r.mean_spend + r.mean_penalty)).abs() < 1e-9);
        // Costs 1 + 16 and 0.5 + 18.
        assert!((r.mean_cost - 17.75).abs() < 1e-12);
        assert!((r.std_cost - (0.5f64 * 1.5 * 1.5).sqrt()).abs() < 1e-12);
        let r = metrics("x", "y", &met[..1]).unwrap();
        assert_eq!(r.std_cost, 0.0);
        assert!(metrics("x", "y", &[]).is_err());
        assert!(report_csv(&[r]).starts_with("experiment,cell,mean_cost,std_cost,shortfall_prob,mean_spend,mean_penalty,n\n"));
    }

    #[test]
    fn bootstrap_covers_known_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let xs: Vec<f64> = (0..2000).map(|_| rng.gen_range(0.0..2.0)).collect();
        let zeros = vec![0.0; xs.len()];
        let (lo, hi) = paired_mean_diff_ci(&xs, &zeros, 1000, 3).unwrap();
        assert!(lo < 1.0 && 1.0 < hi && hi - lo < 0.1, "{lo} {hi}");
    }

    #[test]
    fn self_comparison_ratio_is_one() {
        let cfg = small_sim();
        let resp = cfg.response().unwrap();
        let ps = cfg.problems(&resp, 1.0, Split::Evaluation, 20, 0).unwrap();
        let (pi, _) = pi_setup(&ps, cfg.penalty, [0.5, 0.05]).unwrap();
        let pi = AnyController::Pi(pi);
        let r = experiment_pi_vs_rnn(&pi, &pi, &ps, &[100.0, 500.0], 200, 0).unwrap();
        for b in &r.buckets {
            assert_eq!(b.ratio, 1.0);
            assert_eq!((b.ci_low, b.ci_high), (1.0, 1.0));
        }
        assert_eq!(r.rows.len(), 4);
    }

    #[test]
    fn shock_grid_layout_and_reruns() {
        let cfg = small_sim();
        let a = AnyController::Pi(pi_setup(&cfg.problems(&cfg.response().unwrap(), 0.0, Split::Train, 2, 0).unwrap(), 5.0, [0.5, 0.05]).unwrap().0);
        let models: Vec<(f64, &AnyController)> = [0.0, 0.2, 1.0, 5.0, 10.0].iter().map(|&s| (s, &a)).collect();
        let factors = [1.0, 1.5, 2.0, 3.0, 5.0, 10.0];
        let r = experiment_shock_grid(&models, &cfg, &factors).unwrap();
        assert_eq!(r.rows.len(), 30);
        let again = experiment_shock_grid(&models, &cfg, &factors).unwrap();
        assert_eq!(report_csv(&r.rows), report_csv(&again.rows));
        assert!(experiment_shock_grid(&[], &cfg, &factors).is_err());
    }

    #[test]
    fn constant_bid_penalty_grows_with_shock() {
        let cfg = small_sim();
        let resp = cfg.response().unwrap();
        let mut last = -1.0;
        for f in [1.0, 2.0, 3.0, 5.0, 10.0] {
            let p = SimulatedConfig {
                shock_start: 20,
                ..cfg.clone()
            }
            .shock_problem(&resp, f, 0)
            .unwrap();
            let tr = crate::market::run_on_path(&ConstantBid(0.5), &p.intensities, &p.landscapes, 100.0, 5.0, FeedbackMode::Expected, 0).unwrap();
            assert!(tr.penalty_paid() > last);
            last = tr.penalty_paid();
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn metrics_decompose(costs in proptest::collection::vec((0.0f64..10.0, 0.0f64..5.0), 1..20)) {
            let traces: Vec<EpisodeTrace> = costs.iter().map(|&(v, s)| trace(5.0, &[v], &[s])).collect();
            let r = metrics("e", "c", &traces).unwrap();
            prop_assert!((r.mean_cost - r.mean_spend - r.mean_penalty).abs() < 1e-9);
            prop_assert!((0.0..=1.0).contains(&r.shortfall_prob));
            prop_assert!(r.mean_cost >= 0.0);
        }
    }
}
