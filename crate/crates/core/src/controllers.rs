//! Bidding controllers: a PI regulator around a seasonal reference curve and
//! a GRU whose first state component is the bid.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Tape, Var};
use crate::error::{invalid, parse_err, Error, Result};

/// What a controller sees at the start of period `period`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub period: usize,
    pub horizon: usize,
    pub remaining_goal: f64,
    pub last_volume: f64,
    pub last_spend: f64,
}

impl Observation {
    pub fn remaining_periods(&self) -> usize {
        self.horizon.saturating_sub(self.period)
    }
}

pub trait Controller {
    type State;

    fn init_state(&self) -> Self::State;

    /// Returns the bid level for the observed period and advances the state.
    fn act(&self, state: &mut Self::State, obs: &Observation) -> f64;
}

/// Bids a fixed level regardless of feedback.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantBid(pub f64);

impl Controller for ConstantBid {
    type State = ();

    fn init_state(&self) {}

    fn act(&self, _: &mut (), _: &Observation) -> f64 {
        self.0
    }
}

/// Two-harmonic intraday weight curve
/// `w(t) = max(0, c0 + c1 cos(2πt/T + φ1) + c2 cos(4πt/T + φ2))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferenceCurve {
    pub c0: f64,
    pub c1: f64,
    pub phi1: f64,
    pub c2: f64,
    pub phi2: f64,
}

impl Default for ReferenceCurve {
    fn default() -> Self {
        Self::flat()
    }
}

impl ReferenceCurve {
    pub fn flat() -> Self {
        Self {
            c0: 1.0,
            c1: 0.0,
            phi1: 0.0,
            c2: 0.0,
            phi2: 0.0,
        }
    }

    pub fn weight(&self, t: usize, horizon: usize) -> f64 {
        let x = 2.0 * PI * t as f64 / horizon as f64;
        (self.c0 + self.c1 * (x + self.phi1).cos() + self.c2 * (2.0 * x + self.phi2).cos()).max(0.0)
    }

    /// Share of the remaining goal to deliver in period `t`, i.e.
    /// `w_t / Σ_{s≥t} w_s`, uniform when every remaining weight is zero.
    pub fn share(&self, t: usize, horizon: usize) -> Result<f64> {
        if t >= horizon {
            return Err(invalid(format!(
                "reference volume needs a remaining period (t = {t}, T = {horizon})"
            )));
        }
        let w = self.weight(t, horizon);
        let total: f64 = (t..horizon).map(|s| self.weight(s, horizon)).sum();
        if total > 0.0 {
            Ok(w / total)
        } else {
            Ok(1.0 / (horizon - t) as f64)
        }
    }

    /// Target volume for period `t` given the remaining goal.
    pub fn reference_volume(&self, t: usize, horizon: usize, remaining_goal: f64) -> Result<f64> {
        Ok(remaining_goal * self.share(t, horizon)?)
    }

    fn validate(&self) -> Result<()> {
        let v = [self.c0, self.c1, self.phi1, self.c2, self.phi2];
        if v.iter().any(|x| !x.is_finite()) {
            return Err(invalid("reference curve coefficients must be finite"));
        }
        Ok(())
    }
}

/// Least-squares fit of the two-harmonic model to one curve.
pub fn fit_harmonics(curve: &[f64]) -> Result<ReferenceCurve> {
    let n = curve.len();
    if n < 5 {
        return Err(invalid(format!(
            "harmonic fit needs at least 5 points, got {n}"
        )));
    }
    let basis = |t: usize| {
        let x = 2.0 * PI * t as f64 / n as f64;
        [1.0, x.cos(), x.sin(), (2.0 * x).cos(), (2.0 * x).sin()]
    };
    let mut ata = [[0.0; 5]; 5];
    let mut atb = [0.0; 5];
    for (t, y) in curve.iter().enumerate() {
        let b = basis(t);
        for i in 0..5 {
            atb[i] += b[i] * y;
            for j in 0..5 {
                ata[i][j] += b[i] * b[j];
            }
        }
    }
    let beta = solve5(ata, atb)?;
    // a cos x + b sin x = c cos(x + φ) with c cos φ = a, c sin φ = -b
    let polar = |a: f64, b: f64| {
        let c = a.hypot(b);
        if c == 0.0 {
            (0.0, 0.0)
        } else {
            (c, (-b).atan2(a))
        }
    };
    let (c1, phi1) = polar(beta[1], beta[2]);
    let (c2, phi2) = polar(beta[3], beta[4]);
    Ok(ReferenceCurve {
        c0: beta[0],
        c1,
        phi1,
        c2,
        phi2,
    })
}

fn solve5(mut a: [[f64; 5]; 5], mut b: [f64; 5]) -> Result<[f64; 5]> {
    for col in 0..5 {
        let piv = (col..5)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        if a[piv][col].abs() < 1e-12 {
            return Err(invalid("singular harmonic design"));
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..5 {
            let f = a[r][col] / a[col][col];
            for c in col..5 {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = [0.0; 5];
    for r in (0..5).rev() {
        let s: f64 = (r + 1..5).map(|c| a[r][c] * x[c]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    Ok(x)
}

/// Fits the reference curve to training volume curves: each curve is divided
/// by its mean, the results are averaged and the harmonics fitted.
pub fn fit_reference_curve(curves: &[Vec<f64>]) -> Result<ReferenceCurve> {
    let first = curves
        .first()
        .ok_or_else(|| invalid("reference curve fit needs at least one curve"))?;
    let n = first.len();
    let mut avg = vec![0.0; n];
    let mut used = 0usize;
    for c in curves {
        if c.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "volume curves of lengths {n} and {}",
                c.len()
            )));
        }
        let mean = c.iter().sum::<f64>() / n as f64;
        if mean > 0.0 {
            for (a, v) in avg.iter_mut().zip(c) {
                *a += v / mean;
            }
            used += 1;
        }
    }
    if used == 0 {
        return Ok(ReferenceCurve::flat());
    }
    for a in &mut avg {
        *a /= used as f64;
    }
    fit_harmonics(&avg)
}

/// Gains and reference curve of the PI controller.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PiParams {
    pub kp: f64,
    pub ki: f64,
    pub reference: ReferenceCurve,
}

/// Proportional-integral pacing on `e_t = r_t − V_{t−1}` with the output
/// clamped to `[0, K]` and conditional integration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PiController {
    pub params: PiParams,
    pub max_bid: f64,
}

/// PI state: last error, error integral, last control.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PiState {
    pub last_error: f64,
    pub integral: f64,
    pub last_control: f64,
}

impl PiController {
    pub fn new(params: PiParams, max_bid: f64) -> Result<Self> {
        if !params.kp.is_finite() || !params.ki.is_finite() {
            return Err(invalid("PI gains must be finite"));
        }
        params.reference.validate()?;
        if !(max_bid > 0.0) {
            return Err(invalid(format!("max_bid must be > 0, got {max_bid}")));
        }
        Ok(Self { params, max_bid })
    }

    /// One PI update from the error `e`.
    pub fn step(&self, state: &mut PiState, e: f64) -> f64 {
        let integral = state.integral + e;
        let raw = self.params.kp * e + self.params.ki * integral;
        if (0.0..=self.max_bid).contains(&raw) {
            state.integral = integral;
        }
        let bid = raw.max(0.0).min(self.max_bid);
        state.last_error = e;
        state.last_control = bid;
        bid
    }
}

impl Controller for PiController {
    type State = PiState;

    fn init_state(&self) -> PiState {
        PiState::default()
    }

    fn act(&self, state: &mut PiState, obs: &Observation) -> f64 {
        let share = self
            .params
            .reference
            .share(obs.period, obs.horizon)
            .unwrap_or(1.0);
        let e = obs.remaining_goal * share - obs.last_volume;
        self.step(state, e)
    }
}

/// Records one PI step on a tape. `gains` holds `[kp, ki]`; `integral` is the
/// carried integral. Returns `(bid, integral')`.
pub fn pi_step_tape(tape: &mut Tape, gains: Var, integral: Var, e: Var, max_bid: f64) -> (Var, Var) {
    let kp = tape.index(gains, 0);
    let ki = tape.index(gains, 1);
    let cand = tape.add(integral, e);
    let pe = tape.mul(kp, e);
    let ie = tape.mul(ki, cand);
    let raw = tape.add(pe, ie);
    let next = tape.select(raw, 0.0, max_bid, cand, integral);
    let bid = tape.clamp(raw, 0.0, max_bid);
    (bid, next)
}

/// Scales applied to the GRU observation vector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalizers {
    /// Mean per-period volume of the training set.
    pub volume: f64,
    /// Mean winning price of the training set.
    pub price: f64,
}

impl Default for Normalizers {
    fn default() -> Self {
        Self {
            volume: 1.0,
            price: 1.0,
        }
    }
}

pub const GRU_INPUTS: usize = 4;
pub const GRU_HIDDEN: usize = 16;

/// GRU controller. Parameters are stored flat as `W_z, U_z, b_z, W_r, U_r,
/// b_r, W_c, U_c, b_c` with row-major matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct GruController {
    pub hidden: usize,
    pub inputs: usize,
    pub max_bid: f64,
    pub norm: Normalizers,
    pub params: Vec<f64>,
}

/// GRU episode state: hidden vector and the goal seen at period 0.
#[derive(Debug, Clone, PartialEq)]
pub struct GruState {
    pub h: Vec<f64>,
    pub goal0: Option<f64>,
}

#[derive(Debug, Clone, Copy)]
struct Gate {
    w: usize,
    u: usize,
    b: usize,
}

impl GruController {
    pub fn param_count(hidden: usize, inputs: usize) -> usize {
        3 * (hidden * inputs + hidden * hidden + hidden)
    }

    /// Uniform(−0.1, 0.1) weights, zero biases, update-gate bias +1.
    pub fn init(hidden: usize, max_bid: f64, norm: Normalizers, seed: u64) -> Result<Self> {
        let inputs = GRU_INPUTS;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ctrl = Self {
            hidden,
            inputs,
            max_bid,
            norm,
            params: vec![0.0; Self::param_count(hidden, inputs)],
        };
        for (k, gate) in ctrl.gates().into_iter().enumerate() {
            for i in gate.w..gate.b {
                ctrl.params[i] = rng.gen_range(-0.1..0.1);
            }
            if k == 0 {
                ctrl.params[gate.b..gate.b + hidden].fill(1.0);
            }
        }
        ctrl.validate()?;
        Ok(ctrl)
    }

    pub fn from_params(
        hidden: usize,
        max_bid: f64,
        norm: Normalizers,
        params: Vec<f64>,
    ) -> Result<Self> {
        let c = Self {
            hidden,
            inputs: GRU_INPUTS,
            max_bid,
            norm,
            params,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let want = Self::param_count(self.hidden, self.inputs);
        if self.params.len() != want {
            return Err(Error::ShapeMismatch(format!(
                "GRU with {} hidden units needs {want} parameters, got {}",
                self.hidden,
                self.params.len()
            )));
        }
        if self.hidden == 0 || self.inputs != GRU_INPUTS {
            return Err(invalid("GRU needs >= 1 hidden unit and 4 inputs"));
        }
        if !(self.max_bid > 0.0) {
            return Err(invalid(format!("penalty must be > 0, got {}", self.max_bid)));
        }
        if !(self.norm.volume > 0.0 && self.norm.price > 0.0) {
            return Err(invalid("normalizers must be > 0"));
        }
        if let Some(i) = self.params.iter().position(|p| !p.is_finite()) {
            return Err(Error::NonFinite(format!("GRU parameter {i}")));
        }
        Ok(())
    }

    fn gates(&self) -> [Gate; 3] {
        let (h, i) = (self.hidden, self.inputs);
        let block = h * i + h * h + h;
        let gate = |k: usize| Gate {
            w: k * block,
            u: k * block + h * i,
            b: k * block + h * i + h * h,
        };
        [gate(0), gate(1), gate(2)]
    }

    /// Observation vector `((T−t)/T, G_t/G_0, V/Ī, S/(Ī·p̄))`.
    pub fn normalize(&self, obs: &Observation, goal0: f64) -> [f64; GRU_INPUTS] {
        let g0 = if goal0 > 0.0 { goal0 } else { 1.0 };
        [
            obs.remaining_periods() as f64 / obs.horizon.max(1) as f64,
            obs.remaining_goal * (1.0 / g0),
            obs.last_volume * (1.0 / self.norm.volume),
            obs.last_spend * (1.0 / (self.norm.volume * self.norm.price)),
        ]
    }

    fn carried_scale(&self) -> (Vec<f64>, Vec<f64>) {
        let mut s = vec![1.0; self.hidden];
        let mut t = vec![0.0; self.hidden];
        s[0] = 2.0 / self.max_bid;
        t[0] = -1.0;
        (s, t)
    }

    fn readout_scale(&self) -> (Vec<f64>, Vec<f64>) {
        let mut s = vec![1.0; self.hidden];
        let mut t = vec![0.0; self.hidden];
        s[0] = self.max_bid / 2.0;
        t[0] = self.max_bid / 2.0;
        (s, t)
    }

    /// One cell update on plain vectors; arithmetic mirrors [`Self::step_tape`].
    pub fn step(&self, params: &[f64], h: &[f64], x: &[f64]) -> Vec<f64> {
        let n = self.hidden;
        let p = params;
        let [gz, gr, gc] = self.gates();
        let (cs, ct) = self.carried_scale();
        let hh: Vec<f64> = (0..n).map(|i| cs[i] * h[i] + ct[i]).collect();
        let matvec = |off: usize, v: &[f64]| -> Vec<f64> {
            let cols = v.len();
            (0..n)
                .map(|r| {
                    let mut acc = 0.0;
                    for c in 0..cols {
                        acc += p[off + r * cols + c] * v[c];
                    }
                    acc
                })
                .collect()
        };
        let pre = |g: Gate, hv: &[f64]| -> Vec<f64> {
            let a = matvec(g.w, x);
            let b = matvec(g.u, hv);
            (0..n).map(|i| (a[i] + b[i]) + p[g.b + i]).collect()
        };
        let z: Vec<f64> = pre(gz, &hh).into_iter().map(sigmoid).collect();
        let r: Vec<f64> = pre(gr, &hh).into_iter().map(sigmoid).collect();
        let rh: Vec<f64> = (0..n).map(|i| r[i] * hh[i]).collect();
        let (rs, rt) = self.readout_scale();
        let c: Vec<f64> = pre(gc, &rh)
            .into_iter()
            .enumerate()
            .map(|(i, v)| rs[i] * v.tanh() + rt[i])
            .collect();
        let mut out: Vec<f64> = (0..n).map(|i| h[i] + z[i] * (c[i] - h[i])).collect();
        out[0] = out[0].max(0.0).min(self.max_bid);
        out
    }

    /// Records one cell update on a tape; `params` is the flat parameter node.
    pub fn step_tape(&self, tape: &mut Tape, params: Var, h: Var, x: Var) -> Var {
        let n = self.hidden;
        let [gz, gr, gc] = self.gates();
        let (cs, ct) = self.carried_scale();
        let hh = tape.affine(h, &cs, &ct);
        let ni = self.inputs;
        let pre = |tape: &mut Tape, g: Gate, hv: Var| {
            let w = tape.slice(params, g.w, n * ni);
            let u = tape.slice(params, g.u, n * n);
            let b = tape.slice(params, g.b, n);
            let a = tape.matvec(w, n, x);
            let c = tape.matvec(u, n, hv);
            let s = tape.add(a, c);
            tape.add(s, b)
        };
        let zp = pre(tape, gz, hh);
        let z = tape.sigmoid(zp);
        let rp = pre(tape, gr, hh);
        let r = tape.sigmoid(rp);
        let rh = tape.mul(r, hh);
        let cp = pre(tape, gc, rh);
        let ct_ = tape.tanh(cp);
        let (rs, rt) = self.readout_scale();
        let c = tape.affine(ct_, &rs, &rt);
        let d = tape.sub(c, h);
        let zd = tape.mul(z, d);
        let out = tape.add(h, zd);
        let first = tape.index(out, 0);
        let first = tape.clamp(first, 0.0, self.max_bid);
        let rest = tape.slice(out, 1, n - 1);
        tape.concat(&[first, rest])
    }
}

impl Controller for GruController {
    type State = GruState;

    fn init_state(&self) -> GruState {
        GruState {
            h: vec![0.0; self.hidden],
            goal0: None,
        }
    }

    fn act(&self, state: &mut GruState, obs: &Observation) -> f64 {
        let g0 = *state.goal0.get_or_insert(obs.remaining_goal);
        let x = self.normalize(obs, g0);
        state.h = self.step(&self.params, &state.h, &x);
        state.h[0]
    }
}

/// Either controller kind, for code that picks one at run time.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyController {
    Pi(PiController),
    Gru(GruController),
}

#[derive(Debug, Clone, PartialEq)]
pub enum AnyState {
    Pi(PiState),
    Gru(GruState),
}

impl AnyController {
    pub fn max_bid(&self) -> f64 {
        match self {
            AnyController::Pi(c) => c.max_bid,
            AnyController::Gru(c) => c.max_bid,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            AnyController::Pi(_) => "pi",
            AnyController::Gru(_) => "gru",
        }
    }

    /// Plain-text model file; floats use the shortest round-tripping form.
    pub fn to_model_text(&self) -> String {
        let mut s = String::new();
        match self {
            AnyController::Pi(c) => {
                let r = c.params.reference;
                writeln!(s, "type pi").unwrap();
                writeln!(s, "max_bid {}", c.max_bid).unwrap();
                writeln!(s, "kp {}", c.params.kp).unwrap();
                writeln!(s, "ki {}", c.params.ki).unwrap();
                writeln!(s, "reference {} {} {} {} {}", r.c0, r.c1, r.phi1, r.c2, r.phi2).unwrap();
            }
            AnyController::Gru(c) => {
                writeln!(s, "type gru").unwrap();
                writeln!(s, "hidden {}", c.hidden).unwrap();
                writeln!(s, "inputs {}", c.inputs).unwrap();
                writeln!(s, "max_bid {}", c.max_bid).unwrap();
                writeln!(s, "volume_scale {}", c.norm.volume).unwrap();
                writeln!(s, "price_scale {}", c.norm.price).unwrap();
                writeln!(s, "params {}", c.params.len()).unwrap();
                for p in &c.params {
                    writeln!(s, "{p}").unwrap();
                }
            }
        }
        s
    }

    pub fn from_model_text(text: &str) -> Result<Self> {
        let ctx = "model file";
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let mut field = |name: &str| -> Result<Vec<String>> {
            let line = lines
                .next()
                .ok_or_else(|| parse_err(ctx, format!("missing `{name}` line")))?;
            let mut it = line.split_whitespace();
            if it.next() != Some(name) {
                return Err(parse_err(ctx, format!("expected `{name}`, got `{line}`")));
            }
            Ok(it.map(str::to_string).collect())
        };
        let num = |v: &[String], i: usize| -> Result<f64> {
            v.get(i)
                .ok_or_else(|| parse_err(ctx, "missing value"))?
                .parse::<f64>()
                .map_err(|e| parse_err(ctx, e.to_string()))
        };
        let kind = field("type")?;
        match kind.first().map(String::as_str) {
            Some("pi") => {
                let max_bid = num(&field("max_bid")?, 0)?;
                let kp = num(&field("kp")?, 0)?;
                let ki = num(&field("ki")?, 0)?;
                let r = field("reference")?;
                let reference = ReferenceCurve {
                    c0: num(&r, 0)?,
                    c1: num(&r, 1)?,
                    phi1: num(&r, 2)?,
                    c2: num(&r, 3)?,
                    phi2: num(&r, 4)?,
                };
                Ok(AnyController::Pi(PiController::new(
                    PiParams { kp, ki, reference },
                    max_bid,
                )?))
            }
            Some("gru") => {
                let hidden = num(&field("hidden")?, 0)? as usize;
                let inputs = num(&field("inputs")?, 0)? as usize;
                if inputs != GRU_INPUTS {
                    return Err(parse_err(ctx, format!("unsupported input width {inputs}")));
                }
                let max_bid = num(&field("max_bid")?, 0)?;
                let volume = num(&field("volume_scale")?, 0)?;
                let price = num(&field("price_scale")?, 0)?;
                let count = num(&field("params")?, 0)? as usize;
                let params = lines
                    .by_ref()
                    .take(count)
                    .map(|l| l.trim().parse::<f64>().map_err(|e| parse_err(ctx, e.to_string())))
                    .collect::<Result<Vec<_>>>()?;
                if params.len() != count {
                    return Err(parse_err(
                        ctx,
                        format!("expected {count} parameters, found {}", params.len()),
                    ));
                }
                Ok(AnyController::Gru(GruController::from_params(
                    hidden,
                    max_bid,
                    Normalizers { volume, price },
                    params,
                )?))
            }
            other => Err(parse_err(ctx, format!("unknown model type {other:?}"))),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_model_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Missing(path.to_path_buf()));
        }
        Self::from_model_text(&std::fs::read_to_string(path)?)
    }
}

impl Controller for AnyController {
    type State = AnyState;

    fn init_state(&self) -> AnyState {
        match self {
            AnyController::Pi(c) => AnyState::Pi(c.init_state()),
            AnyController::Gru(c) => AnyState::Gru(c.init_state()),
        }
    }

    fn act(&self, state: &mut AnyState, obs: &Observation) -> f64 {
        match (self, state) {
            (AnyController::Pi(c), AnyState::Pi(s)) => c.act(s, obs),
            (AnyController::Gru(c), AnyState::Gru(s)) => c.act(s, obs),
            _ => f64::NAN,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use proptest::prelude::*;
    use rand::Rng;

    fn obs(period: usize, horizon: usize, g: f64, v: f64, s: f64) -> Observation {
        Observation {
            period,
            horizon,
            remaining_goal: g,
            last_volume: v,
            last_spend: s,
        }
    }

    fn pi(kp: f64, ki: f64) -> PiController {
        PiController::new(
            PiParams {
                kp,
                ki,
                reference: ReferenceCurve::flat(),
            },
            10.0,
        )
        .unwrap()
    }

    #[test]
    fn pi_zero_error_bids_zero() {
        let c = pi(1.0, 0.5);
        let mut s = c.init_state();
        assert_eq!(c.step(&mut s, 0.0), 0.0);
        // Reference 10 per period and last volume 10: zero error.
        assert_eq!(c.act(&mut s, &obs(0, 10, 100.0, 10.0, 0.0)), 0.0);
    }

    #[test]
    fn pi_hand_arithmetic() {
        let c = pi(1.0, 0.5);
        let mut s = c.init_state();
        c.step(&mut s, 1.0);
        assert_eq!(c.step(&mut s, 1.0), 2.0);
        assert_eq!(s.integral, 2.0);
    }

    #[test]
    fn pi_anti_windup() {
        let c = pi(1.0, 0.0);
        let mut s = PiState {
            integral: 4.0,
            ..Default::default()
        };
        assert_eq!(c.step(&mut s, -3.0), 0.0);
        assert_eq!(s.integral, 4.0);
        assert_eq!(c.step(&mut s, 30.0), 10.0);
        assert_eq!(s.integral, 4.0);
    }

    #[test]
    fn pi_without_integral_is_memoryless() {
        let c = pi(0.3, 0.0);
        let o = obs(3, 10, 50.0, 2.0, 1.0);
        let mut fresh = c.init_state();
        let mut used = c.init_state();
        for k in 0..5 {
            c.act(&mut used, &obs(k, 10, 80.0 - k as f64, 9.0, 3.0));
        }
        assert_eq!(c.act(&mut fresh, &o), c.act(&mut used, &o));
    }

    #[test]
    fn reference_volume_examples() {
        let r = ReferenceCurve::flat();
        assert!((r.reference_volume(0, 10, 100.0).unwrap() - 10.0).abs() < 1e-12);
        assert_eq!(r.reference_volume(9, 10, 37.0).unwrap(), 37.0);
        assert!(r.reference_volume(10, 10, 37.0).is_err());
        let zero = ReferenceCurve {
            c0: -1.0,
            ..ReferenceCurve::flat()
        };
        assert!((zero.reference_volume(6, 10, 8.0).unwrap() - 2.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn reference_shares_sum_to_goal(
            c0 in 0.0f64..2.0, c1 in -1.0f64..1.0, p1 in -3.0f64..3.0,
            c2 in -1.0f64..1.0, p2 in -3.0f64..3.0, g in 0.0f64..1e4, horizon in 1usize..300,
        ) {
            let r = ReferenceCurve { c0, c1, phi1: p1, c2, phi2: p2 };
            // Deliver each period's reference exactly; the goal is met at T.
            let mut rem = g;
            for t in 0..horizon {
                rem -= r.reference_volume(t, horizon, rem).unwrap();
            }
            prop_assert!(rem.abs() <= 1e-9 * (1.0 + g));
        }
    }

    #[test]
    fn flat_curves_fit_no_harmonics() {
        let r = fit_reference_curve(&[vec![5.0; 48], vec![2.0; 48]]).unwrap();
        assert!((r.c0 - 1.0).abs() < 1e-12);
        assert!(r.c1.abs() < 1e-12 && r.c2.abs() < 1e-12);
        assert!(fit_reference_curve(&[]).is_err());
    }

    #[test]
    fn pure_cosine_is_recovered() {
        let n = 96;
        let curve: Vec<f64> = (0..n).map(|t| (2.0 * PI * t as f64 / n as f64).cos()).collect();
        let r = fit_harmonics(&curve).unwrap();
        assert!((r.c1 - 1.0).abs() < 1e-6 && r.phi1.abs() < 1e-6 && r.c2.abs() < 1e-6);
        assert!(r.c0.abs() < 1e-9);
        let shifted: Vec<f64> = curve.iter().map(|v| 1.0 + v).collect();
        let r = fit_reference_curve(&[shifted]).unwrap();
        assert!((r.c1 - 1.0).abs() < 1e-6 && r.phi1.abs() < 1e-6);
    }

    #[test]
    fn noisy_cosine_within_least_squares_error() {
        use rand_distr::{Distribution, Normal};
        let n = 288;
        let sigma = 0.2;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let noise = Normal::new(0.0, sigma).unwrap();
        let curve: Vec<f64> = (0..n)
            .map(|t| {
                let x = 2.0 * PI * t as f64 / n as f64;
                0.7 * (x + 0.4).cos() + 0.3 * (2.0 * x - 1.0).cos() + noise.sample(&mut rng)
            })
            .collect();
        let r = fit_harmonics(&curve).unwrap();
        let tol = 3.0 * sigma / (n as f64).sqrt();
        assert!((r.c1 - 0.7).abs() < tol, "{r:?}");
        assert!((r.c2 - 0.3).abs() < tol, "{r:?}");
    }

    fn rand_gru(seed: u64, k: f64) -> GruController {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = GruController::param_count(GRU_HIDDEN, GRU_INPUTS);
        let params = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        GruController::from_params(GRU_HIDDEN, k, Normalizers { volume: 10.0, price: 2.0 }, params)
            .unwrap()
    }

    #[test]
    fn gru_layout() {
        assert_eq!(GruController::param_count(16, 4), 1008);
        let c = GruController::init(16, 5.0, Normalizers::default(), 1).unwrap();
        let [gz, gr, _] = c.gates();
        assert!(c.params[gz.b..gz.b + 16].iter().all(|b| *b == 1.0));
        assert!(c.params[gr.b..gr.b + 16].iter().all(|b| *b == 0.0));
        assert!(c.params[gz.w..gz.b].iter().all(|w| w.abs() < 0.1));
    }

    #[test]
    fn zero_gru_bids_quarter_penalty() {
        let k = 4.0;
        let c = GruController::from_params(16, k, Normalizers::default(), vec![0.0; 1008]).unwrap();
        let mut s = c.init_state();
        let bid = c.act(&mut s, &obs(0, 10, 10.0, 0.0, 0.0));
        assert_eq!(bid, k / 4.0);
        assert!(s.h[1..].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn gru_order_matters() {
        let c = rand_gru(3, 5.0);
        let a = obs(0, 10, 100.0, 3.0, 2.0);
        let b = obs(0, 10, 100.0, 9.0, 1.0);
        let run = |first: &Observation, second: &Observation| {
            let mut s = c.init_state();
            c.act(&mut s, first);
            c.act(&mut s, second);
            s.h
        };
        assert_ne!(run(&a, &b), run(&b, &a));
    }

    #[test]
    fn gru_plain_and_tape_are_bit_identical() {
        let c = rand_gru(8, 5.0);
        let mut tape = Tape::new();
        let p = tape.input(c.params.len());
        let x = tape.input(4);
        let h0 = tape.input(16);
        let h1 = c.step_tape(&mut tape, p, h0, x);
        let xs = [0.5, 0.7, 1.3, 0.2];
        let mut hs = vec![0.1; 16];
        hs[0] = 2.0;
        tape.forward(&[&c.params, &xs, &hs]).unwrap();
        assert_eq!(tape.value(h1).unwrap(), &c.step(&c.params, &hs, &xs)[..]);
    }

    #[test]
    fn gru_step_gradient_matches_finite_differences() {
        let c = rand_gru(11, 5.0);
        let xs = [0.9, 0.6, 1.1, 0.4];
        let mut hs = vec![0.2; 16];
        hs[0] = 1.5;
        let r = grad_check(
            |t, p| {
                let x = t.constant(&xs);
                let h = t.constant(&hs);
                let h1 = c.step_tape(t, p, h, x);
                let h2 = c.step_tape(t, p, h1, x);
                t.sum(h2)
            },
            &c.params,
            1e-5,
        )
        .unwrap();
        assert!(!r.non_differentiable);
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn gru_state_bounds(seed in 0u64..1000, k in 0.5f64..20.0,
                            vols in proptest::collection::vec(0.0f64..1e3, 1..30)) {
            let c = rand_gru(seed, k);
            let mut s = c.init_state();
            let n = vols.len();
            for (t, v) in vols.iter().enumerate() {
                let bid = c.act(&mut s, &obs(t, n, 500.0 - t as f64, *v, v * 2.0));
                prop_assert!((0.0..=k).contains(&bid));
                prop_assert!(s.h[1..].iter().all(|x| x.abs() <= 1.0));
            }
        }

        #[test]
        fn pi_bid_bounds(kp in -10.0f64..10.0, ki in -10.0f64..10.0,
                         vols in proptest::collection::vec(0.0f64..1e3, 1..30)) {
            let c = pi(kp, ki);
            let mut s = c.init_state();
            let n = vols.len();
            for (t, v) in vols.iter().enumerate() {
                let bid = c.act(&mut s, &obs(t, n, 300.0, *v, 0.0));
                prop_assert!((0.0..=10.0).contains(&bid));
                prop_assert!(s.integral.is_finite());
            }
        }
    }

    #[test]
    fn pi_tape_matches_plain() {
        let c = pi(0.4, 0.1);
        let errors = [3.0, 12.0, -40.0, 5.0, 25.0];
        let mut s = c.init_state();
        let plain: Vec<f64> = errors.iter().map(|e| c.step(&mut s, *e)).collect();
        let mut tape = Tape::new();
        let g = tape.input(2);
        let mut integral = tape.scalar(0.0);
        let mut bids = Vec::new();
        for e in errors {
            let ev = tape.scalar(e);
            let (b, i) = pi_step_tape(&mut tape, g, integral, ev, 10.0);
            integral = i;
            bids.push(b);
        }
        tape.forward(&[&[0.4, 0.1]]).unwrap();
        let taped: Vec<f64> = bids.iter().map(|b| tape.value(*b).unwrap()[0]).collect();
        assert_eq!(plain, taped);
    }

    #[test]
    fn model_files_round_trip() {
        let g = AnyController::Gru(rand_gru(2, 7.5));
        assert_eq!(AnyController::from_model_text(&g.to_model_text()).unwrap(), g);
        let p = AnyController::Pi(
            PiController::new(
                PiParams {
                    kp: 0.123456789012345,
                    ki: -1e-7,
                    reference: ReferenceCurve {
                        c0: 1.0,
                        c1: 0.3,
                        phi1: -0.1,
                        c2: 0.05,
                        phi2: 2.0,
                    },
                },
                5.0,
            )
            .unwrap(),
        );
        assert_eq!(AnyController::from_model_text(&p.to_model_text()).unwrap(), p);
        assert!(AnyController::from_model_text("type lstm\n").is_err());
        let mut short = g.to_model_text();
        short.truncate(short.len() / 2);
        assert!(AnyController::from_model_text(&short).is_err());
    }
}
