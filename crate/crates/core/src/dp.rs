//! Reference-optimal pacing policies.
//!
//! [`solve_bellman`] runs backward induction on a `(t, G, H)` grid,
//! [`brute_force_cost`] enumerates bid sequences for tiny deterministic
//! instances, and [`solve_pde`] integrates the continuous-time equation
//! `∂a/∂t + ½σ² ∂²a/∂H² − H F(a) ∂a/∂G = 0` backward from the terminal
//! condition with an explicit upwind scheme. Both solvers return a
//! [`PolicyField`] holding bids and expected costs.

use std::fmt::Write as _;
use std::sync::Arc;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, parse_err, Error, Result};
use crate::landscape::Response;
use crate::market::{final_cost, EpisodeTrace};

/// Physicists' Gauss–Hermite nodes and weights, 7 points.
const GH_NODES: [f64; 7] = [
    -2.651_961_356_835_233_4,
    -1.673_551_628_767_471_4,
    -0.816_287_882_858_964_7,
    0.0,
    0.816_287_882_858_964_7,
    1.673_551_628_767_471_4,
    2.651_961_356_835_233_4,
];
const GH_WEIGHTS: [f64; 7] = [
    0.000_971_781_245_099_519_2,
    0.054_515_582_819_127_03,
    0.425_607_252_610_127_8,
    0.810_264_617_556_807_3,
    0.425_607_252_610_127_8,
    0.054_515_582_819_127_03,
    0.000_971_781_245_099_519_2,
];

/// Standard-normal quadrature `(z_i, w_i)` with `Σ w_i g(z_i) ≈ E[g(Z)]`.
pub fn normal_quadrature() -> [(f64, f64); 7] {
    let s = std::f64::consts::PI.sqrt();
    let mut out = [(0.0, 0.0); 7];
    for i in 0..7 {
        out[i] = (std::f64::consts::SQRT_2 * GH_NODES[i], GH_WEIGHTS[i] / s);
    }
    out
}

/// Law of the volume state between periods.
pub trait TransitionKernel: Send + Sync {
    /// Intensity realized during period `t` in state `h`.
    fn intensity(&self, _t: usize, h: f64) -> f64 {
        h
    }

    /// Quadrature nodes `(h', weight)` for the state at `t + 1`.
    fn next(&self, t: usize, h: f64) -> Vec<(f64, f64)>;
}

/// `H' = max(0, H + μΔ + σ√Δ Z)` integrated with 7-node Gauss–Hermite.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianKernel {
    pub drift: f64,
    pub sigma: f64,
    pub period_length: f64,
}

impl TransitionKernel for GaussianKernel {
    fn next(&self, _t: usize, h: f64) -> Vec<(f64, f64)> {
        let d = self.period_length;
        if self.sigma == 0.0 {
            return vec![((h + self.drift * d).max(0.0), 1.0)];
        }
        normal_quadrature()
            .iter()
            .map(|(z, w)| ((h + self.drift * d + self.sigma * d.sqrt() * z).max(0.0), *w))
            .collect()
    }
}

/// A known intensity path; the `H` coordinate of the grid is unused.
#[derive(Debug, Clone, PartialEq)]
pub struct DeterministicPath(pub Vec<f64>);

impl TransitionKernel for DeterministicPath {
    fn intensity(&self, t: usize, _h: f64) -> f64 {
        self.0[t.min(self.0.len() - 1)]
    }

    fn next(&self, _t: usize, h: f64) -> Vec<(f64, f64)> {
        vec![(h, 1.0)]
    }
}

/// Bids and expected costs on a `(t, G, H)` grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyField {
    pub solver: String,
    pub times: Vec<f64>,
    pub g_grid: Vec<f64>,
    pub h_grid: Vec<f64>,
    pub max_bid: f64,
    /// Length of one time slice; volume per slice is `H·F(a)·period_length`.
    pub period_length: f64,
    #[serde(skip)]
    pub bid: Vec<f64>,
    #[serde(skip)]
    pub cost: Vec<f64>,
}

fn interp_weights(grid: &[f64], x: f64) -> (usize, usize, f64, bool) {
    let n = grid.len();
    if n == 1 {
        return (0, 0, 0.0, x != grid[0]);
    }
    if x <= grid[0] {
        return (0, 0, 0.0, x < grid[0]);
    }
    if x >= grid[n - 1] {
        return (n - 1, n - 1, 0.0, x > grid[n - 1]);
    }
    let j = grid.partition_point(|g| *g <= x).min(n - 1);
    let i = j - 1;
    let w = (x - grid[i]) / (grid[j] - grid[i]);
    (i, j, w, false)
}

impl PolicyField {
    pub fn n_slices(&self) -> usize {
        self.times.len()
    }

    pub fn idx(&self, t: usize, g: usize, h: usize) -> usize {
        (t * self.g_grid.len() + g) * self.h_grid.len() + h
    }

    fn bilinear(&self, data: &[f64], t: usize, g: f64, h: f64) -> (f64, bool) {
        let (g0, g1, wg, og) = interp_weights(&self.g_grid, g);
        let (h0, h1, wh, oh) = interp_weights(&self.h_grid, h);
        let v = |gi, hi| data[self.idx(t, gi, hi)];
        let a = v(g0, h0) * (1.0 - wh) + v(g0, h1) * wh;
        let b = v(g1, h0) * (1.0 - wh) + v(g1, h1) * wh;
        (a * (1.0 - wg) + b * wg, og || oh)
    }

    /// Bilinear bid at slice `t`; the flag reports clamping at the grid edge.
    pub fn bid_at(&self, t: usize, g: f64, h: f64) -> (f64, bool) {
        self.bilinear(&self.bid, t, g, h)
    }

    pub fn cost_at(&self, t: usize, g: f64, h: f64) -> (f64, bool) {
        self.bilinear(&self.cost, t, g, h)
    }

    /// `# {json header}` followed by `t,G,H,bid,cost` rows, keeping every
    /// `decimation`-th node along each axis (the terminal slice is always kept).
    pub fn to_text(&self, decimation: usize) -> String {
        let step = decimation.max(1);
        let pick = |n: usize| -> Vec<usize> {
            let mut v: Vec<usize> = (0..n).step_by(step).collect();
            if v.last() != Some(&(n - 1)) {
                v.push(n - 1);
            }
            v
        };
        let (ts, gs, hs) = (
            pick(self.times.len()),
            pick(self.g_grid.len()),
            pick(self.h_grid.len()),
        );
        let header = PolicyField {
            times: ts.iter().map(|&i| self.times[i]).collect(),
            g_grid: gs.iter().map(|&i| self.g_grid[i]).collect(),
            h_grid: hs.iter().map(|&i| self.h_grid[i]).collect(),
            bid: Vec::new(),
            cost: Vec::new(),
            ..self.clone()
        };
        let mut s = format!("# {}\n", serde_json::to_string(&header).unwrap());
        s.push_str("t,G,H,bid,cost\n");
        for &t in &ts {
            for &g in &gs {
                for &h in &hs {
                    let k = self.idx(t, g, h);
                    writeln!(
                        s,
                        "{},{},{},{},{}",
                        self.times[t], self.g_grid[g], self.h_grid[h], self.bid[k], self.cost[k]
                    )
                    .unwrap();
                }
            }
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let ctx = "policy field";
        let mut lines = text.lines();
        let header = lines
            .next()
            .and_then(|l| l.strip_prefix("# "))
            .ok_or_else(|| parse_err(ctx, "missing `# ` header line"))?;
        let mut f: PolicyField =
            serde_json::from_str(header).map_err(|e| parse_err(ctx, e.to_string()))?;
        if lines.next() != Some("t,G,H,bid,cost") {
            return Err(parse_err(ctx, "missing column header"));
        }
        let n = f.times.len() * f.g_grid.len() * f.h_grid.len();
        for (i, line) in lines.enumerate() {
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 5 {
                return Err(parse_err(ctx, format!("row {i} has {} columns", cols.len())));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| parse_err(ctx, e.to_string()));
            f.bid.push(num(cols[3])?);
            f.cost.push(num(cols[4])?);
        }
        if f.bid.len() != n {
            return Err(parse_err(ctx, format!("expected {n} rows, got {}", f.bid.len())));
        }
        Ok(f)
    }
}

fn check_grid(name: &str, grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(invalid(format!("{name} grid is empty")));
    }
    if grid.iter().any(|v| !v.is_finite()) || grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(invalid(format!("{name} grid must be finite and strictly increasing")));
    }
    Ok(())
}

/// Uniform grid of `n` points on `[lo, hi]`.
pub fn uniform_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    (0..n)
        .map(|i| {
            if i == n - 1 {
                hi
            } else {
                lo + (hi - lo) * i as f64 / (n - 1) as f64
            }
        })
        .collect()
}

/// Grid on `[lo, hi]`, `lo < 0 < hi`, refined around 0: the spacing grows
/// linearly with `|G|` from `min_step` at the origin, `dG/ds = min_step + r|G|`,
/// with `r` chosen so that exactly `n` points cover the interval.
pub fn stretched_grid(lo: f64, hi: f64, n: usize, min_step: f64) -> Result<Vec<f64>> {
    if !(lo < 0.0 && hi > 0.0 && min_step > 0.0) || n < 4 {
        return Err(invalid("stretched grid needs lo < 0 < hi, min_step > 0 and n >= 4"));
    }
    let cells = (n - 1) as f64;
    let span = |r: f64, x: f64| {
        if r == 0.0 {
            x / min_step
        } else {
            (r * x / min_step).ln_1p() / r
        }
    };
    let width = |r: f64| span(r, hi) + span(r, -lo);
    if width(0.0) <= cells {
        return Ok(uniform_grid(lo, hi, n));
    }
    let (mut a, mut b) = (0.0, 1.0);
    while width(b) > cells {
        b *= 2.0;
    }
    for _ in 0..200 {
        let m = 0.5 * (a + b);
        if width(m) > cells {
            a = m;
        } else {
            b = m;
        }
    }
    let r = b;
    let s_lo = -span(r, -lo);
    let s_hi = span(r, hi);
    let map = |s: f64| {
        let v = min_step * (r * s.abs()).exp_m1() / r;
        if s < 0.0 {
            -v
        } else {
            v
        }
    };
    Ok((0..n)
        .map(|i| match i {
            0 => lo,
            _ if i == n - 1 => hi,
            _ => map(s_lo + (s_hi - s_lo) * i as f64 / cells),
        })
        .collect())
}

/// Discrete-time control problem for [`solve_bellman`].
pub struct BellmanProblem<'a> {
    pub periods: usize,
    pub g_grid: Vec<f64>,
    pub h_grid: Vec<f64>,
    pub response: &'a dyn Response,
    pub kernel: &'a dyn TransitionKernel,
    pub max_bid: f64,
    /// Candidate bids, sorted ascending within `[0, K]`.
    pub bid_grid: Vec<f64>,
    pub period_length: f64,
}

/// Backward induction of `C_t(G,H) = min_a S(H,a) + E[C_{t+1}(G − V(H,a), H')]`
/// from `C_T(G,H) = K max(0, G)`.
pub fn solve_bellman(p: &BellmanProblem) -> Result<PolicyField> {
    check_grid("G", &p.g_grid)?;
    check_grid("H", &p.h_grid)?;
    check_grid("bid", &p.bid_grid)?;
    if !(p.max_bid > 0.0) {
        return Err(invalid(format!("penalty must be > 0, got {}", p.max_bid)));
    }
    if p.bid_grid[0] < 0.0 || *p.bid_grid.last().unwrap() > p.max_bid {
        return Err(invalid("bid grid must lie within [0, K]"));
    }
    if p.periods == 0 || !(p.period_length > 0.0) {
        return Err(invalid("need at least one period of positive length"));
    }
    let (ng, nh, nt) = (p.g_grid.len(), p.h_grid.len(), p.periods);
    let mut field = PolicyField {
        solver: "dp".into(),
        times: (0..=nt).map(|t| t as f64 * p.period_length).collect(),
        g_grid: p.g_grid.clone(),
        h_grid: p.h_grid.clone(),
        max_bid: p.max_bid,
        period_length: p.period_length,
        bid: vec![0.0; (nt + 1) * ng * nh],
        cost: vec![0.0; (nt + 1) * ng * nh],
    };
    let k = p.max_bid;
    for gi in 0..ng {
        let g = p.g_grid[gi];
        for hi in 0..nh {
            let i = field.idx(nt, gi, hi);
            field.cost[i] = k * g.max(0.0);
            field.bid[i] = if g > 0.0 { k } else { 0.0 };
        }
    }
    let responses: Vec<(f64, f64)> = p
        .bid_grid
        .iter()
        .map(|&a| {
            let r = p.response.eval(a);
            (r.win, r.spend)
        })
        .collect();
    let slice = ng * nh;
    let mut outside = 0usize;
    for t in (0..nt).rev() {
        let (head, tail) = field.cost.split_at_mut((t + 1) * slice);
        let next_cost = &tail[..slice];
        let nodes: Vec<(f64, Vec<(usize, usize, f64, f64)>)> = p
            .h_grid
            .iter()
            .map(|&h| {
                let ns = p.kernel.next(t, h);
                let interp = ns
                    .iter()
                    .map(|&(hn, w)| {
                        let (a, b, wh, out) = interp_weights(&p.h_grid, hn);
                        if out {
                            outside += 1;
                        }
                        (a, b, wh, w)
                    })
                    .collect();
                (p.kernel.intensity(t, h), interp)
            })
            .collect();
        let cells: Vec<(f64, f64)> = (0..slice)
            .into_par_iter()
            .map(|cell| {
                let (gi, hi) = (cell / nh, cell % nh);
                let g = p.g_grid[gi];
                let (intensity, ref next) = nodes[hi];
                let scale = intensity * p.period_length;
                let mut best = (f64::INFINITY, 0.0);
                for (bi, &(win, spend)) in responses.iter().enumerate() {
                    let g_next = g - scale * win;
                    let (g0, g1, wg, _) = interp_weights(&p.g_grid, g_next);
                    let mut expected = 0.0;
                    for &(h0, h1, wh, w) in next {
                        let c = |gj: usize, hj: usize| next_cost[gj * nh + hj];
                        let lo = c(g0, h0) * (1.0 - wh) + c(g0, h1) * wh;
                        let hi_ = c(g1, h0) * (1.0 - wh) + c(g1, h1) * wh;
                        expected += w * (lo * (1.0 - wg) + hi_ * wg);
                    }
                    let total = scale * spend + expected;
                    if total < best.0 {
                        best = (total, p.bid_grid[bi]);
                    }
                }
                best
            })
            .collect();
        let base = t * slice;
        for (cell, (c, a)) in cells.into_iter().enumerate() {
            head[base + cell] = c;
            field.bid[base + cell] = a;
        }
    }
    if outside > 0 {
        warn!("{outside} transition nodes fell outside the H grid and were clamped");
    }
    Ok(field)
}

/// Minimum final cost over every bid sequence of a deterministic instance,
/// with the lexicographically lowest minimizing sequence.
pub fn brute_force_cost(
    response: &dyn Response,
    intensities: &[f64],
    bid_grid: &[f64],
    goal: f64,
    penalty: f64,
) -> Result<(f64, Vec<f64>)> {
    let t = intensities.len();
    let n = bid_grid.len();
    if n == 0 || t == 0 {
        return Err(invalid("brute force needs bids and periods"));
    }
    let combos = (n as f64).powi(t as i32);
    if combos > 1e6 {
        return Err(Error::TooLarge(format!("{n}^{t} bid sequences exceed 10^6")));
    }
    let resp: Vec<(f64, f64)> = bid_grid
        .iter()
        .map(|&a| {
            let r = response.eval(a);
            (r.win, r.spend)
        })
        .collect();
    let mut digits = vec![0usize; t];
    let mut best = (f64::INFINITY, Vec::new());
    loop {
        let mut spends = Vec::with_capacity(t);
        let mut vols = Vec::with_capacity(t);
        for (s, &d) in digits.iter().enumerate() {
            vols.push(intensities[s] * resp[d].0);
            spends.push(intensities[s] * resp[d].1);
        }
        let c = final_cost(&spends, &vols, goal, penalty);
        if c < best.0 {
            best = (c, digits.iter().map(|&d| bid_grid[d]).collect());
        }
        // Odometer with the last period varying fastest.
        let mut pos = t;
        loop {
            if pos == 0 {
                return Ok(best);
            }
            pos -= 1;
            digits[pos] += 1;
            if digits[pos] < n {
                break;
            }
            digits[pos] = 0;
        }
    }
}

/// Continuous-time problem for [`solve_pde`].
#[derive(Debug, Clone)]
pub struct PdeProblem {
    pub sigma: f64,
    pub horizon: f64,
    /// Output slices; the field has `steps + 1` time points.
    pub steps: usize,
    pub g_grid: Vec<f64>,
    pub h_grid: Vec<f64>,
    pub response: Arc<dyn Response>,
    pub max_bid: f64,
    /// Explicit sub-steps per output slice; chosen from the CFL bound when `None`.
    pub substeps: Option<usize>,
}

fn uniform_step(name: &str, grid: &[f64]) -> Result<f64> {
    check_grid(name, grid)?;
    if grid.len() < 3 {
        return Err(invalid(format!("{name} grid needs at least 3 points")));
    }
    let d = (grid[grid.len() - 1] - grid[0]) / (grid.len() - 1) as f64;
    if grid.windows(2).any(|w| ((w[1] - w[0]) - d).abs() > 1e-9 * d.max(1.0)) {
        return Err(invalid(format!("{name} grid must be uniform")));
    }
    Ok(d)
}

/// Largest stable explicit step for the given grids.
pub fn pde_max_step(sigma: f64, dg: f64, dh: f64, h_max: f64, f_max: f64) -> f64 {
    let rate = sigma * sigma / (dh * dh) + h_max * f_max / dg;
    if rate > 0.0 {
        1.0 / rate
    } else {
        f64::INFINITY
    }
}

/// Solves the bid equation backward from the terminal ramp
/// `a(T,G,H) = K·clamp(G/ΔG + ½, 0, 1)`, where `ΔG` is the width of the
/// cell straddling 0, co-evolving the expected cost
/// `C_τ = ½σ²C_HH − H F(a) C_G + H s(a)` from `C(T,G,H) = K max(0, G)`.
/// Transport along G is semi-Lagrangian in the win rate with monotone cubic
/// interpolation; diffusion in H is explicit.
pub fn solve_pde(p: &PdeProblem) -> Result<PolicyField> {
    check_grid("G", &p.g_grid)?;
    if p.g_grid.len() < 3 {
        return Err(invalid("G grid needs at least 3 points"));
    }
    let dgs: Vec<f64> = p.g_grid.windows(2).map(|w| w[1] - w[0]).collect();
    let dg_min = dgs.iter().copied().fold(f64::INFINITY, f64::min);
    let dh = if p.h_grid.len() == 1 {
        check_grid("H", &p.h_grid)?;
        1.0
    } else {
        uniform_step("H", &p.h_grid)?
    };
    if !(p.max_bid > 0.0) || !(p.horizon > 0.0) || p.steps == 0 || !(p.sigma >= 0.0) {
        return Err(invalid("need K > 0, horizon > 0, steps >= 1 and sigma >= 0"));
    }
    if p.h_grid[0] < 0.0 {
        return Err(invalid("H grid must be non-negative"));
    }
    if p.g_grid[0] >= 0.0 || *p.g_grid.last().unwrap() <= 0.0 {
        return Err(invalid("G grid must straddle 0"));
    }
    if p.h_grid.len() == 1 && p.sigma > 0.0 {
        return Err(invalid("sigma > 0 needs an H grid with at least 3 points"));
    }
    let inverse = WinInverse::new(p.response.as_ref(), p.max_bid)?;
    let f_max = inverse.win.last().unwrap().max(0.0);
    let h_max = *p.h_grid.last().unwrap();
    let dt_out = p.horizon / p.steps as f64;
    let dt_max = pde_max_step(p.sigma, dg_min, dh, h_max, f_max);
    let needed = (dt_out / dt_max).ceil().max(1.0) as usize;
    let substeps = match p.substeps {
        None => needed,
        Some(n) if n >= needed => n,
        Some(n) => {
            return Err(Error::Cfl {
                detail: format!(
                    "{n} substeps give dt = {:.6e} > {:.6e} (sigma = {}, min dG = {dg_min}, dH = {dh}, H_max = {h_max})",
                    dt_out / n as f64,
                    dt_max,
                    p.sigma
                ),
                suggested_dt: dt_max,
                suggested_substeps: needed,
            })
        }
    };
    let dt = dt_out / substeps as f64;
    let (ng, nh, ns) = (p.g_grid.len(), p.h_grid.len(), p.steps);
    let k = p.max_bid;
    let mut field = PolicyField {
        solver: "pde".into(),
        times: (0..=ns).map(|n| n as f64 * dt_out).collect(),
        g_grid: p.g_grid.clone(),
        h_grid: p.h_grid.clone(),
        max_bid: k,
        period_length: dt_out,
        bid: vec![0.0; (ns + 1) * ng * nh],
        cost: vec![0.0; (ns + 1) * ng * nh],
    };
    // Width of the cell straddling G = 0 sets the terminal ramp.
    let zero_cell = p.g_grid.partition_point(|g| *g <= 0.0) - 1;
    let ramp = dgs[zero_cell];
    let mut a = vec![0.0; ng * nh];
    let mut c = vec![0.0; ng * nh];
    for gi in 0..ng {
        let g = p.g_grid[gi];
        for hi in 0..nh {
            a[gi * nh + hi] = k * (g / ramp + 0.5).clamp(0.0, 1.0);
            c[gi * nh + hi] = k * g.max(0.0);
        }
    }
    let store = |field: &mut PolicyField, n: usize, a: &[f64], c: &[f64]| {
        let off = n * ng * nh;
        field.bid[off..off + ng * nh].copy_from_slice(a);
        field.cost[off..off + ng * nh].copy_from_slice(c);
    };
    store(&mut field, ns, &a, &c);
    // The win rate u = F(a) is what the characteristics carry; in it the
    // noiseless fan is linear in G, which the bid itself is far from near K.
    let mut u: Vec<f64> = a.iter().map(|&b| p.response.eval(b).win).collect();
    let half_s2 = 0.5 * p.sigma * p.sigma / (dh * dh);
    let mut na = a.clone();
    let mut nc = c.clone();
    let mut nu = u.clone();
    let mut du = vec![0.0; ng * nh];
    let mut dc = vec![0.0; ng * nh];
    let u0 = p.response.eval(0.0).win;
    for n in (0..ns).rev() {
        for _ in 0..substeps {
            monotone_slopes(&u, &dgs, nh, &mut du);
            monotone_slopes(&c, &dgs, nh, &mut dc);
            na.par_chunks_mut(nh)
                .zip(nc.par_chunks_mut(nh))
                .zip(nu.par_chunks_mut(nh))
                .enumerate()
                .for_each(|(gi, ((ra, rc), ru))| {
                    if gi == 0 {
                        ra.fill(0.0);
                        rc.fill(0.0);
                        ru.fill(u0);
                        return;
                    }
                    let w = dgs[gi - 1];
                    for hi in 0..nh {
                        let i = gi * nh + hi;
                        let h = p.h_grid[hi];
                        let (up, dn) = if nh == 1 {
                            (i, i)
                        } else if hi == 0 {
                            (i + 1, i + 1)
                        } else if hi == nh - 1 {
                            (i - 1, i - 1)
                        } else {
                            (i + 1, i - 1)
                        };
                        let left = i - nh;
                        // Departure point of the characteristic through this node; the CFL
                        // bound keeps it inside the upwind cell.
                        let mut carried = u[i];
                        let mut x = 1.0;
                        for _ in 0..PDE_CHARACTERISTIC_ITERS {
                            x = 1.0 - h * carried * dt / w;
                            carried = hermite(x, w, u[left], du[left], u[i], du[i]);
                        }
                        let moved = inverse.bid(carried);
                        let r = p.response.eval(moved);
                        rc[hi] = hermite(x, w, c[left], dc[left], c[i], dc[i])
                            + dt * (half_s2 * (c[up] - 2.0 * c[i] + c[dn]) + h * r.spend);
                        if half_s2 > 0.0 {
                            let b = (moved + dt * half_s2 * (a[up] - 2.0 * a[i] + a[dn])).clamp(0.0, k);
                            ra[hi] = b;
                            ru[hi] = p.response.eval(b).win;
                        } else {
                            ra[hi] = moved;
                            ru[hi] = carried;
                        }
                    }
                });
            std::mem::swap(&mut a, &mut na);
            std::mem::swap(&mut c, &mut nc);
            std::mem::swap(&mut u, &mut nu);
        }
        store(&mut field, n, &a, &c);
    }
    Ok(field)
}

/// Tabulated inverse of the win curve on `[0, K]`.
struct WinInverse {
    bid: Vec<f64>,
    win: Vec<f64>,
}

impl WinInverse {
    const SAMPLES: usize = 4097;

    fn new(response: &dyn Response, k: f64) -> Result<Self> {
        let bid: Vec<f64> = (0..Self::SAMPLES)
            .map(|i| k * i as f64 / (Self::SAMPLES - 1) as f64)
            .collect();
        let mut win: Vec<f64> = Vec::with_capacity(bid.len());
        for &b in &bid {
            let f = response.eval(b).win;
            let prev = win.last().copied().unwrap_or(f64::NEG_INFINITY);
            if f < prev - 1e-12 {
                return Err(invalid(format!("response is not monotone near bid {b}")));
            }
            win.push(f.max(prev));
        }
        Ok(Self { bid, win })
    }

    /// Smallest bid reaching win rate `u`, clamped to `[0, K]`.
    fn bid(&self, u: f64) -> f64 {
        let j = self.win.partition_point(|w| *w < u);
        if j == 0 {
            return self.bid[0];
        }
        if j == self.win.len() {
            return *self.bid.last().unwrap();
        }
        let (w0, w1) = (self.win[j - 1], self.win[j]);
        let t = if w1 > w0 { (u - w0) / (w1 - w0) } else { 1.0 };
        self.bid[j - 1] + t * (self.bid[j] - self.bid[j - 1])
    }
}

const PDE_CHARACTERISTIC_ITERS: usize = 3;

/// Fritsch-Carlson slopes along G for every H column of a row-major `(G, H)` array.
fn monotone_slopes(u: &[f64], dgs: &[f64], nh: usize, out: &mut [f64]) {
    let ng = dgs.len() + 1;
    out.par_chunks_mut(nh).enumerate().for_each(|(gi, row)| {
        for (hi, d) in row.iter_mut().enumerate() {
            let at = |g: usize| u[g * nh + hi];
            let secant = |g: usize| (at(g + 1) - at(g)) / dgs[g];
            *d = if gi == 0 {
                secant(0)
            } else if gi == ng - 1 {
                secant(ng - 2)
            } else {
                let (s0, s1) = (secant(gi - 1), secant(gi));
                if s0 * s1 <= 0.0 {
                    0.0
                } else {
                    let (h0, h1) = (dgs[gi - 1], dgs[gi]);
                    let (w0, w1) = (2.0 * h1 + h0, h1 + 2.0 * h0);
                    (w0 + w1) / (w0 / s0 + w1 / s1)
                }
            };
        }
    });
}

/// Cubic Hermite interpolant on a cell of width `w` at fraction `t` from the left node.
fn hermite(t: f64, w: f64, u0: f64, d0: f64, u1: f64, d1: f64) -> f64 {
    let (t2, t3) = (t * t, t * t * t);
    (2.0 * t3 - 3.0 * t2 + 1.0) * u0 + (t3 - 2.0 * t2 + t) * w * d0 + (3.0 * t2 - 2.0 * t3) * u1 + (t3 - t2) * w * d1
}

/// Plays a field forward along a known intensity path with expected feedback.
/// Bids are read at slice `t` by bilinear interpolation in `(G, H)`.
pub fn rollout_policy(
    field: &PolicyField,
    response: &dyn Response,
    intensities: &[f64],
    goal: f64,
    penalty: f64,
) -> Result<EpisodeTrace> {
    if intensities.len() + 1 > field.n_slices() {
        return Err(invalid(format!(
            "path of {} periods is longer than the field's {} slices",
            intensities.len(),
            field.n_slices() - 1
        )));
    }
    let mut trace = EpisodeTrace {
        bids: Vec::new(),
        volumes: Vec::new(),
        spends: Vec::new(),
        remaining_goal: Vec::new(),
        goal,
        penalty,
        final_cost: 0.0,
    };
    let mut remaining = goal;
    let mut clamped = 0usize;
    for (t, &h) in intensities.iter().enumerate() {
        let (bid, out) = field.bid_at(t, remaining, h);
        clamped += out as usize;
        let r = response.eval(bid);
        let scale = h * field.period_length;
        trace.bids.push(bid);
        trace.volumes.push(scale * r.win);
        trace.spends.push(scale * r.spend);
        trace.remaining_goal.push(remaining);
        remaining -= scale * r.win;
    }
    if clamped > 0 {
        warn!("trajectory left the policy grid in {clamped} periods; values were clamped");
    }
    trace.final_cost = final_cost(&trace.spends, &trace.volumes, goal, penalty);
    Ok(trace)
}
