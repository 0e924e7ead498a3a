//! Stochastic gradient training of the GRU controller and PI gain tuning.
//!
//! Both loops differentiate the episode loss `Σ S_t + K·max(0, G − Σ V_t)`
//! through the expected (smoothed) market response with the [`Tape`].
//! Each problem's loss is divided by its goal before averaging over a batch,
//! so that one step size serves goals that differ by orders of magnitude.

use std::fmt::Write as _;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ScalarFn, Tape, Var};
use crate::controllers::{pi_step_tape, Controller, GruController, PiController, PiParams};
use crate::error::{invalid, Error, Result};
use crate::landscape::Response;
use crate::market::{run_on_path, EpisodeTrace, FeedbackMode, LandscapeProcess};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr0: f64,
    pub decay: f64,
    pub decay_steps: usize,
    /// Global gradient-norm threshold on the normalized loss.
    pub clip: f64,
    pub validation_period: usize,
    pub max_problems: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 100,
            lr0: 0.1,
            decay: 0.5,
            decay_steps: 400,
            clip: 5.0,
            validation_period: 200,
            max_problems: 20_000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be >= 1"));
        }
        if !(self.lr0 >= 0.0) || !(self.decay >= 0.0) || self.decay_steps == 0 {
            return Err(invalid("need lr0 >= 0, decay >= 0 and decay_steps >= 1"));
        }
        if !(self.clip > 0.0) {
            return Err(invalid("clip threshold must be > 0"));
        }
        if self.validation_period == 0 {
            return Err(invalid("validation_period must be >= 1"));
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        self.max_problems / self.batch_size
    }
}

/// Inverse-time decay `α(n) = α0 / (1 + η⌊n/N⌋)`.
pub fn learning_rate(step: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr0 / (1.0 + cfg.decay * (step / cfg.decay_steps) as f64)
}

/// Rescales `grad` to norm `threshold` when its norm exceeds it. Returns the
/// norm before clipping and whether clipping happened.
pub fn clip_gradient(grad: &mut [f64], threshold: f64) -> (f64, bool) {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > threshold {
        let s = threshold / norm;
        for g in grad.iter_mut() {
            *g *= s;
        }
        (norm, true)
    } else {
        (norm, false)
    }
}

/// One day of bidding: a realized intensity path, the market response per
/// period, a volume goal and the shortfall penalty.
#[derive(Debug, Clone)]
pub struct BiddingProblem {
    pub id: u64,
    pub intensities: Vec<f64>,
    pub landscapes: LandscapeProcess,
    pub goal: f64,
    pub penalty: f64,
}

impl BiddingProblem {
    pub fn validate(&self) -> Result<()> {
        if self.intensities.is_empty() {
            return Err(invalid(format!("problem {} has no periods", self.id)));
        }
        if !(self.goal >= 0.0) || !(self.penalty > 0.0) {
            return Err(invalid(format!(
                "problem {} needs goal >= 0 and penalty > 0",
                self.id
            )));
        }
        Ok(())
    }

    pub fn horizon(&self) -> usize {
        self.intensities.len()
    }

    /// Loss normalizer: the goal (1 for a zero goal), so that the training
    /// loss is a cost per goal impression.
    pub fn loss_scale(&self) -> f64 {
        if self.goal > 0.0 {
            self.goal
        } else {
            1.0
        }
    }

    /// Runs a controller with expected feedback.
    pub fn evaluate<C: Controller + ?Sized>(&self, controller: &C) -> Result<EpisodeTrace> {
        run_on_path(
            controller,
            &self.intensities,
            &self.landscapes,
            self.goal,
            self.penalty,
            FeedbackMode::Expected,
            self.id,
        )
    }
}

#[derive(Debug)]
struct WinFn(Arc<dyn Response>);

impl ScalarFn for WinFn {
    fn eval(&self, x: f64) -> (f64, f64) {
        let p = self.0.eval(x);
        (p.win, p.dwin)
    }
}

#[derive(Debug)]
struct Exp;

impl ScalarFn for Exp {
    fn eval(&self, x: f64) -> (f64, f64) {
        let e = x.exp();
        (e, e)
    }
}

#[derive(Debug)]
struct SpendFn(Arc<dyn Response>);

impl ScalarFn for SpendFn {
    fn eval(&self, x: f64) -> (f64, f64) {
        let p = self.0.eval(x);
        (p.spend, p.dspend)
    }
}

/// Appends the market response to `bid` at period `t`; returns `(V_t, S_t)`.
fn market_step(tape: &mut Tape, problem: &BiddingProblem, t: usize, bid: Var) -> (Var, Var) {
    let resp = problem.landscapes.at(t);
    let i = problem.intensities[t];
    let win = tape.map(bid, Arc::new(WinFn(resp.clone())));
    let spend = tape.map(bid, Arc::new(SpendFn(resp)));
    (tape.scale(win, i), tape.scale(spend, i))
}

/// Records the unrolled GRU episode; returns the loss node. The tape's only
/// input is the flat parameter vector.
pub fn record_gru_episode(tape: &mut Tape, params: Var, ctrl: &GruController, problem: &BiddingProblem) -> Var {
    let horizon = problem.horizon();
    let g0 = if problem.goal > 0.0 { problem.goal } else { 1.0 };
    let inv_v = 1.0 / ctrl.norm.volume;
    let inv_s = 1.0 / (ctrl.norm.volume * ctrl.norm.price);
    let mut h = tape.constant(&vec![0.0; ctrl.hidden]);
    let mut remaining = tape.scalar(problem.goal);
    let mut last_v = tape.scalar(0.0);
    let mut last_s = tape.scalar(0.0);
    let mut spend = tape.scalar(0.0);
    for t in 0..horizon {
        let clock = tape.scalar((horizon - t) as f64 / horizon as f64);
        let g = tape.scale(remaining, 1.0 / g0);
        let v = tape.scale(last_v, inv_v);
        let s = tape.scale(last_s, inv_s);
        let x = tape.concat(&[clock, g, v, s]);
        h = ctrl.step_tape(tape, params, h, x);
        let bid = tape.index(h, 0);
        let (vol, sp) = market_step(tape, problem, t, bid);
        spend = tape.add(spend, sp);
        remaining = tape.sub(remaining, vol);
        last_v = vol;
        last_s = sp;
    }
    let short = tape.max_const(remaining, 0.0);
    let pen = tape.scale(short, problem.penalty);
    tape.add(spend, pen)
}

/// Episode loss in currency and its gradient with respect to the GRU
/// parameters, by backpropagation through the whole day.
pub fn episode_loss_grad(ctrl: &GruController, problem: &BiddingProblem) -> Result<(f64, Vec<f64>)> {
    let mut tape = Tape::new();
    let p = tape.input(ctrl.params.len());
    let loss = record_gru_episode(&mut tape, p, ctrl, problem);
    tape.forward(&[&ctrl.params])?;
    let value = tape.value(loss)?[0];
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("loss of problem {}", problem.id)));
    }
    let grad = tape.backward(loss).map_err(|e| match e {
        Error::NonFinite(m) => Error::NonFinite(format!("{m} (problem {})", problem.id)),
        other => other,
    })?;
    Ok((value, grad.into_inner().remove(0)))
}

/// Unit of the PI gains. Tuning works on `ln(gain / gain_unit)`, which keeps
/// both gains positive and makes steps relative.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PiScaling {
    pub gain_unit: f64,
}

/// Records a PI episode with gains `exp(theta) · gain_unit`; returns the loss node.
pub fn record_pi_episode(
    tape: &mut Tape,
    theta: Var,
    pi: &PiController,
    scaling: PiScaling,
    problem: &BiddingProblem,
) -> Var {
    let horizon = problem.horizon();
    let gains = tape.map(theta, Arc::new(Exp));
    let gains = tape.scale(gains, scaling.gain_unit);
    let mut integral = tape.scalar(0.0);
    let mut remaining = tape.scalar(problem.goal);
    let mut last_v = tape.scalar(0.0);
    let mut spend = tape.scalar(0.0);
    for t in 0..horizon {
        let share = pi.params.reference.share(t, horizon).unwrap_or(1.0);
        let r = tape.scale(remaining, share);
        let e = tape.sub(r, last_v);
        let (bid, next) = pi_step_tape(tape, gains, integral, e, pi.max_bid);
        integral = next;
        let (vol, sp) = market_step(tape, problem, t, bid);
        spend = tape.add(spend, sp);
        remaining = tape.sub(remaining, vol);
        last_v = vol;
    }
    let short = tape.max_const(remaining, 0.0);
    let pen = tape.scale(short, problem.penalty);
    tape.add(spend, pen)
}

/// Loss and gradient with respect to the log-gains `theta`.
pub fn pi_loss_grad(
    pi: &PiController,
    scaling: PiScaling,
    theta: &[f64; 2],
    problem: &BiddingProblem,
) -> Result<(f64, [f64; 2])> {
    let mut tape = Tape::new();
    let v = tape.input(2);
    let loss = record_pi_episode(&mut tape, v, pi, scaling, problem);
    tape.forward(&[theta])?;
    let value = tape.value(loss)?[0];
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("loss of problem {}", problem.id)));
    }
    let g = tape.backward(loss)?;
    let g = g.wrt(0);
    Ok((value, [g[0], g[1]]))
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub lr: f64,
    pub batch_loss: f64,
    pub grad_norm: f64,
    pub clipped: bool,
    pub val_loss: Option<f64>,
}

pub fn log_to_csv(rows: &[LogRow]) -> String {
    let mut s = String::from("step,lr,batch_loss,grad_norm,clipped,val_loss\n");
    for r in rows {
        let val = r.val_loss.map(|v| v.to_string()).unwrap_or_default();
        writeln!(
            s,
            "{},{},{},{},{},{}",
            r.step, r.lr, r.batch_loss, r.grad_norm, r.clipped as u8, val
        )
        .unwrap();
    }
    s
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<P> {
    /// Parameters with the lowest validation loss seen.
    pub best: P,
    pub best_step: usize,
    pub best_val: f64,
    pub initial_val: f64,
    pub final_params: P,
    pub log: Vec<LogRow>,
    /// Step at which the divergence rule stopped training.
    pub diverged_at: Option<usize>,
}

impl<P> TrainOutcome<P> {
    /// Turns a diverged run into [`Error::Diverged`].
    pub fn into_result(self) -> Result<Self> {
        match self.diverged_at {
            Some(step) => {
                let last = self
                    .log
                    .iter()
                    .rev()
                    .find_map(|r| r.val_loss)
                    .unwrap_or(f64::NAN);
                Err(Error::Diverged {
                    step,
                    val_loss: last,
                    initial: self.initial_val,
                })
            }
            None => Ok(self),
        }
    }
}

/// Mean normalized loss of a controller over problems.
pub fn mean_normalized_cost<C: Controller + Sync>(controller: &C, problems: &[BiddingProblem]) -> Result<f64> {
    let costs = problems
        .par_iter()
        .map(|p| Ok(p.evaluate(controller)?.final_cost / p.loss_scale()))
        .collect::<Result<Vec<f64>>>()?;
    Ok(costs.iter().sum::<f64>() / costs.len() as f64)
}

/// Generic SGD loop shared by GRU training and PI tuning.
fn sgd<P, G, V, I>(
    init: Vec<f64>,
    problems: &[BiddingProblem],
    validation: &[BiddingProblem],
    cfg: &TrainConfig,
    seed: u64,
    grad_fn: G,
    val_fn: V,
    mut on_improve: I,
    wrap: impl Fn(&[f64]) -> P,
) -> Result<TrainOutcome<P>>
where
    G: Fn(&[f64], &BiddingProblem) -> Result<(f64, Vec<f64>)> + Sync,
    V: Fn(&[f64]) -> Result<f64>,
    I: FnMut(usize, f64, &[f64]) -> Result<()>,
{
    cfg.validate()?;
    if validation.is_empty() {
        return Err(invalid("validation set is empty"));
    }
    if problems.is_empty() {
        return Err(invalid("training set is empty"));
    }
    let mut params = init;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..problems.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0usize;
    let steps = cfg.steps();
    let initial_val = val_fn(&params)?;
    let mut best = (params.clone(), 0usize, initial_val);
    on_improve(0, initial_val, &params)?;
    let mut log = Vec::with_capacity(steps + 1);
    log.push(LogRow {
        step: 0,
        lr: learning_rate(0, cfg),
        batch_loss: f64::NAN,
        grad_norm: 0.0,
        clipped: false,
        val_loss: Some(initial_val),
    });
    let mut above = 0usize;
    let mut diverged_at = None;
    for step in 0..steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let results = batch
            .par_iter()
            .map(|&i| {
                let p = &problems[i];
                let (loss, g) = grad_fn(&params, p)?;
                Ok((loss / p.loss_scale(), g, p.loss_scale()))
            })
            .collect::<Result<Vec<_>>>()?;
        let n = results.len() as f64;
        let mut grad = vec![0.0; params.len()];
        let mut batch_loss = 0.0;
        for (loss, g, scale) in &results {
            batch_loss += loss;
            for (a, b) in grad.iter_mut().zip(g) {
                *a += b / scale;
            }
        }
        batch_loss /= n;
        for g in grad.iter_mut() {
            *g /= n;
        }
        let (grad_norm, clipped) = clip_gradient(&mut grad, cfg.clip);
        let lr = learning_rate(step, cfg);
        for (p, g) in params.iter_mut().zip(&grad) {
            *p -= lr * g;
        }
        let done = step + 1;
        let val_loss = if done % cfg.validation_period == 0 || done == steps {
            Some(val_fn(&params)?)
        } else {
            None
        };
        log.push(LogRow {
            step: done,
            lr,
            batch_loss,
            grad_norm,
            clipped,
            val_loss,
        });
        if let Some(v) = val_loss {
            if v < best.2 {
                best = (params.clone(), done, v);
                on_improve(done, v, &params)?;
            }
            if v > 10.0 * initial_val {
                above += 1;
                if above >= 3 {
                    diverged_at = Some(done);
                    break;
                }
            } else {
                above = 0;
            }
        }
    }
    Ok(TrainOutcome {
        best: wrap(&best.0),
        best_step: best.1,
        best_val: best.2,
        initial_val,
        final_params: wrap(&params),
        log,
        diverged_at,
    })
}

/// Trains GRU parameters by batch SGD and returns the parameters with the
/// best validation loss. `on_improve` is called for the initial parameters
/// and after every validation improvement.
pub fn train<I>(
    init: &GruController,
    problems: &[BiddingProblem],
    validation: &[BiddingProblem],
    cfg: &TrainConfig,
    seed: u64,
    mut on_improve: I,
) -> Result<TrainOutcome<GruController>>
where
    I: FnMut(usize, f64, &GruController) -> Result<()>,
{
    for p in problems.iter().chain(validation) {
        p.validate()?;
    }
    let with = |params: &[f64]| GruController {
        params: params.to_vec(),
        ..init.clone()
    };
    sgd(
        init.params.clone(),
        problems,
        validation,
        cfg,
        seed,
        |params, p| episode_loss_grad(&with(params), p),
        |params| mean_normalized_cost(&with(params), validation),
        |step, v, params| on_improve(step, v, &with(params)),
        with,
    )
}

/// Tunes the proportional and integral gains with the reference curve frozen.
/// Both initial gains must be positive.
pub fn tune_pi(
    init: &PiController,
    scaling: PiScaling,
    problems: &[BiddingProblem],
    validation: &[BiddingProblem],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome<PiController>> {
    for p in problems.iter().chain(validation) {
        p.validate()?;
    }
    if !(scaling.gain_unit > 0.0) {
        return Err(invalid("PI gain unit must be > 0"));
    }
    if !(init.params.kp > 0.0 && init.params.ki > 0.0) {
        return Err(invalid("PI tuning needs positive initial gains"));
    }
    let with = |theta: &[f64]| PiController {
        params: PiParams {
            kp: theta[0].exp() * scaling.gain_unit,
            ki: theta[1].exp() * scaling.gain_unit,
            ..init.params
        },
        max_bid: init.max_bid,
    };
    let theta0 = vec![
        (init.params.kp / scaling.gain_unit).ln(),
        (init.params.ki / scaling.gain_unit).ln(),
    ];
    sgd(
        theta0,
        problems,
        validation,
        cfg,
        seed,
        |theta, p| {
            let (l, g) = pi_loss_grad(init, scaling, &[theta[0], theta[1]], p)?;
            Ok((l, g.to_vec()))
        },
        |theta| mean_normalized_cost(&with(theta), validation),
        |_, _, _| Ok(()),
        with,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check_coords;
    use crate::controllers::{Normalizers, ReferenceCurve};
    use crate::landscape::{smooth_landscape, BidLandscape, BidNoise, PriceGrid};
    use rand::Rng;

    #[test]
    fn learning_rate_schedule() {
        let c = TrainConfig::default();
        assert_eq!(learning_rate(0, &c), 0.1);
        assert_eq!(learning_rate(399, &c), 0.1);
        assert_eq!(learning_rate(400, &c), 0.1 / 1.5);
        assert_eq!(learning_rate(800, &c), 0.05);
    }

    #[test]
    fn clipping() {
        let mut g = vec![0.3, 0.4];
        assert_eq!(clip_gradient(&mut g, 5.0), (0.5, false));
        assert_eq!(g, vec![0.3, 0.4]);
        let mut g = vec![30.0, 40.0];
        let (n, c) = clip_gradient(&mut g, 5.0);
        assert_eq!((n, c), (50.0, true));
        assert!((g[0] - 3.0).abs() < 1e-12 && (g[1] - 4.0).abs() < 1e-12);
        let mut g = vec![0.0; 3];
        assert_eq!(clip_gradient(&mut g, 5.0), (0.0, false));
        assert_eq!(g, vec![0.0; 3]);
    }

    pub(crate) fn toy_response() -> Arc<dyn Response> {
        let grid = Arc::new(PriceGrid::standard());
        let land = BidLandscape::lognormal(grid, 1.0, 0.5).unwrap();
        Arc::new(smooth_landscape(&land, BidNoise::Gamma { shape: 4.0 }).unwrap())
    }

    pub(crate) fn toy_problem(id: u64, horizon: usize, goal: f64, resp: &Arc<dyn Response>) -> BiddingProblem {
        let mut rng = ChaCha8Rng::seed_from_u64(id);
        BiddingProblem {
            id,
            intensities: (0..horizon).map(|_| rng.gen_range(5.0..15.0)).collect(),
            landscapes: LandscapeProcess::Constant(resp.clone()),
            goal,
            penalty: 3.0,
        }
    }

    fn rand_gru(seed: u64, scale: f64) -> GruController {
        let mut c = GruController::init(16, 3.0, Normalizers { volume: 10.0, price: 1.0 }, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 99);
        for p in &mut c.params {
            *p += rng.gen_range(-scale..scale);
        }
        c
    }

    #[test]
    fn loss_matches_simulated_episode() {
        let resp = toy_response();
        let c = rand_gru(1, 0.3);
        for id in 0..5 {
            let p = toy_problem(id, 12, 40.0, &resp);
            let (loss, _) = episode_loss_grad(&c, &p).unwrap();
            let tr = p.evaluate(&c).unwrap();
            assert!((loss - tr.final_cost).abs() < 1e-9 * (1.0 + loss), "{loss} {}", tr.final_cost);
        }
    }

    #[test]
    fn bptt_gradient_matches_finite_differences() {
        let resp = toy_response();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for k in 0..4 {
            let c = rand_gru(10 + k, 0.3);
            let p = toy_problem(100 + k, 10, 60.0, &resp);
            let coords: Vec<usize> = (0..20).map(|_| rng.gen_range(0..c.params.len())).collect();
            let r = grad_check_coords(|t, v| record_gru_episode(t, v, &c, &p), &c.params, 1e-5, &coords).unwrap();
            assert!(!r.non_differentiable);
            assert!(r.max_rel_error < 1e-5, "{r:?}");
        }
    }

    /// A GRU whose bid readout saturates at a constant level.
    fn locked_gru(high: bool) -> GruController {
        let mut c = GruController::from_params(16, 3.0, Normalizers::default(), vec![0.0; 1008]).unwrap();
        let [gz, _, gc] = c_gates();
        // Update gate fully open for the first unit, candidate saturated.
        c.params[gz] = 50.0;
        c.params[gc] = if high { 50.0 } else { -50.0 };
        c
    }

    /// Offsets of the first-unit biases of the update and candidate gates.
    fn c_gates() -> [usize; 3] {
        let block = 16 * 4 + 16 * 16 + 16;
        let bias = 16 * 4 + 16 * 16;
        [bias, block + bias, 2 * block + bias]
    }

    #[test]
    fn locked_controllers() {
        let resp = toy_response();
        let p = toy_problem(7, 10, 20.0, &resp);
        let hi = locked_gru(true);
        let tr = p.evaluate(&hi).unwrap();
        assert!(tr.bids.iter().all(|b| (b - 3.0).abs() < 1e-9));
        assert_eq!(tr.penalty_paid(), 0.0);
        let (loss, _) = episode_loss_grad(&hi, &p).unwrap();
        assert!((loss - tr.total_spend()).abs() < 1e-9);

        let lo = locked_gru(false);
        let (loss, g) = episode_loss_grad(&lo, &p).unwrap();
        let tr = p.evaluate(&lo).unwrap();
        assert!(tr.bids.iter().all(|b| *b < 1e-12));
        // Bid 0 sits below the smoothed support: no volume, no spend, full penalty.
        assert!((loss - 3.0 * 20.0).abs() < 1e-6);
        assert!(g.iter().all(|v| v.is_finite()));
    }

    fn toy_sets(n: usize, nv: usize, horizon: usize) -> (Vec<BiddingProblem>, Vec<BiddingProblem>) {
        let resp = toy_response();
        let train = (0..n as u64).map(|i| toy_problem(i, horizon, 60.0, &resp)).collect();
        let val = (0..nv as u64).map(|i| toy_problem(10_000 + i, horizon, 60.0, &resp)).collect();
        (train, val)
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let (tr, va) = toy_sets(20, 5, 8);
        let c = rand_gru(4, 0.1);
        let cfg = TrainConfig {
            lr0: 0.0,
            batch_size: 5,
            max_problems: 40,
            validation_period: 2,
            ..Default::default()
        };
        let out = train(&c, &tr, &va, &cfg, 1, |_, _, _| Ok(())).unwrap();
        assert_eq!(out.best.params, c.params);
        assert_eq!(out.final_params.params, c.params);
        let vals: Vec<f64> = out.log.iter().filter_map(|r| r.val_loss).collect();
        assert!(vals.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn training_is_deterministic_and_selects_minimum() {
        let (tr, va) = toy_sets(40, 8, 8);
        let c = rand_gru(5, 0.1);
        let cfg = TrainConfig {
            batch_size: 10,
            max_problems: 200,
            validation_period: 4,
            ..Default::default()
        };
        let a = train(&c, &tr, &va, &cfg, 9, |_, _, _| Ok(())).unwrap();
        let b = train(&c, &tr, &va, &cfg, 9, |_, _, _| Ok(())).unwrap();
        assert_eq!(log_to_csv(&a.log), log_to_csv(&b.log));
        assert_eq!(a.best.params, b.best.params);
        let last = a.log.iter().rev().find_map(|r| r.val_loss).unwrap();
        assert!(a.best_val <= last);
        assert!(a.best_val <= a.initial_val);
        let min = a.log.iter().filter_map(|r| r.val_loss).fold(f64::INFINITY, f64::min);
        assert_eq!(a.best_val, min);
    }

    #[test]
    fn zero_goal_drives_bids_to_zero() {
        let resp = toy_response();
        let tr: Vec<_> = (0..20).map(|i| toy_problem(i, 8, 0.0, &resp)).collect();
        let va: Vec<_> = (0..4).map(|i| toy_problem(500 + i, 8, 0.0, &resp)).collect();
        let c = GruController::init(16, 3.0, Normalizers { volume: 10.0, price: 1.0 }, 2).unwrap();
        let cfg = TrainConfig {
            batch_size: 10,
            max_problems: 3000,
            validation_period: 50,
            lr0: 0.5,
            ..Default::default()
        };
        let out = train(&c, &tr, &va, &cfg, 0, |_, _, _| Ok(())).unwrap();
        assert!(out.best_val < 0.1 * out.initial_val, "{} -> {}", out.initial_val, out.best_val);
    }

    #[test]
    fn divergence_is_reported() {
        let (tr, va) = toy_sets(10, 3, 6);
        let c = rand_gru(6, 0.1);
        let mut o = train(
            &c,
            &tr,
            &va,
            &TrainConfig {
                batch_size: 5,
                max_problems: 10,
                validation_period: 1,
                ..Default::default()
            },
            0,
            |_, _, _| Ok(()),
        )
        .unwrap();
        assert!(o.diverged_at.is_none());
        o.diverged_at = Some(2);
        assert!(matches!(o.into_result(), Err(Error::Diverged { step: 2, .. })));
        assert!(train(&c, &tr, &[], &TrainConfig::default(), 0, |_, _, _| Ok(())).is_err());
    }

    fn pi_default() -> PiController {
        PiController::new(
            PiParams {
                kp: 0.05,
                ki: 0.005,
                reference: ReferenceCurve::flat(),
            },
            3.0,
        )
        .unwrap()
    }

    #[test]
    fn pi_gradient_matches_finite_differences() {
        let resp = toy_response();
        let pi = pi_default();
        let scaling = PiScaling { gain_unit: 0.3 };
        for k in 0..5 {
            let p = toy_problem(300 + k, 10, 60.0, &resp);
            let theta = [(0.2 + 0.05 * k as f64).ln(), 0.02f64.ln()];
            let r = crate::autodiff::grad_check(|t, v| record_pi_episode(t, v, &pi, scaling, &p), &theta, 1e-6)
                .unwrap();
            assert!(r.max_rel_error < 1e-5, "{r:?}");
        }
    }

    #[test]
    fn pi_tape_loss_matches_simulation() {
        let resp = toy_response();
        let pi = pi_default();
        let p = toy_problem(41, 15, 80.0, &resp);
        let scaling = PiScaling { gain_unit: 0.05 };
        let (loss, _) = pi_loss_grad(&pi, scaling, &[0.0, 0.1f64.ln()], &p).unwrap();
        let tr = p.evaluate(&pi).unwrap();
        assert!((loss - tr.final_cost).abs() < 1e-9 * (1.0 + loss));
    }

    #[test]
    fn tuned_pi_beats_default_gains() {
        let resp = toy_response();
        let p = toy_problem(77, 20, 120.0, &resp);
        let pi = PiController::new(
            PiParams {
                kp: 0.01,
                ki: 0.001,
                reference: ReferenceCurve::flat(),
            },
            3.0,
        )
        .unwrap();
        let scaling = PiScaling { gain_unit: 0.1 };
        let cfg = TrainConfig {
            batch_size: 1,
            max_problems: 3000,
            validation_period: 10,
            ..Default::default()
        };
        let out = tune_pi(&pi, scaling, std::slice::from_ref(&p), std::slice::from_ref(&p), &cfg, 0).unwrap();
        let base = p.evaluate(&pi).unwrap().final_cost;
        let tuned = p.evaluate(&out.best).unwrap().final_cost;
        assert!(tuned <= base);
        // Grid-search oracle over the same gains.
        let mut best = f64::INFINITY;
        for i in 0..=20 {
            for j in 0..=20 {
                let c = PiController {
                    params: PiParams {
                        kp: 0.02 * i as f64,
                        ki: 0.005 * j as f64,
                        ..pi.params
                    },
                    max_bid: 3.0,
                };
                best = best.min(p.evaluate(&c).unwrap().final_cost);
            }
        }
        assert!(tuned <= best * 1.05, "tuned {tuned} grid {best} base {base}");
        assert!(out.best.params.kp.is_finite() && out.best.params.ki.is_finite());
        let tr = p.evaluate(&out.best).unwrap();
        assert!(tr.bids.iter().all(|b| (0.0..=3.0).contains(b)));
    }
}
