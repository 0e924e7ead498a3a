//! Winning-bid landscapes and the market's response to a bid level.
//!
//! A [`BidLandscape`] is the distribution of the highest competing bid over one
//! period, discretized on a geometric [`PriceGrid`]. Mass in the bin
//! `(edges[k-1], edges[k]]` is treated as an atom at the bin's geometric centre
//! (the lowest bin's atom sits at `edges[0]`), so a bid wins every atom whose
//! price is at or below it and pays that atom's price (second-price semantics).
//!
//! Bids can be randomized around a control level with a [`BidNoise`] family.
//! [`smooth_landscape`] turns a landscape plus noise into a [`SmoothedLandscape`]
//! whose win probability and spend are smooth in the control level, which is
//! what the differentiable training path consumes through the [`Response`] trait.

use std::fmt::Write as _;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Gamma, LogNormal, Normal};
use statrs::function::erf::erfc;
use statrs::function::gamma::{gamma_ur, ln_gamma};

use crate::error::{invalid, parse_err, Result};

/// Geometric grid of price levels (CPM).
#[derive(Debug, Clone, PartialEq)]
pub struct PriceGrid {
    min_price: f64,
    max_price: f64,
    edges: Vec<f64>,
}

impl PriceGrid {
    /// `edges[k] = min·(max/min)^(k/(n-1))`.
    pub fn geometric(min_price: f64, max_price: f64, n_bins: usize) -> Result<Self> {
        if !(min_price > 0.0) || !min_price.is_finite() {
            return Err(invalid(format!("min_price must be positive, got {min_price}")));
        }
        if !(max_price > min_price) || !max_price.is_finite() {
            return Err(invalid(format!(
                "max_price must exceed min_price ({min_price}), got {max_price}"
            )));
        }
        if n_bins < 2 {
            return Err(invalid(format!("n_bins must be at least 2, got {n_bins}")));
        }
        let span = max_price / min_price;
        let last = (n_bins - 1) as f64;
        let mut edges: Vec<f64> = (0..n_bins)
            .map(|k| min_price * span.powf(k as f64 / last))
            .collect();
        edges[0] = min_price;
        edges[n_bins - 1] = max_price;
        Ok(Self {
            min_price,
            max_price,
            edges,
        })
    }

    /// The grid used for production-style landscapes: 100 levels from 0.01 to 100.
    pub fn standard() -> Self {
        Self::geometric(0.01, 100.0, 100).expect("standard grid is valid")
    }

    pub fn min_price(&self) -> f64 {
        self.min_price
    }

    pub fn max_price(&self) -> f64 {
        self.max_price
    }

    pub fn n_bins(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    /// Ratio between consecutive edges.
    pub fn ratio(&self) -> f64 {
        (self.max_price / self.min_price).powf(1.0 / (self.n_bins() - 1) as f64)
    }

    /// Index of the bin holding `price`: the smallest edge at or above it,
    /// with out-of-grid prices clamped to the first or last bin.
    pub fn bin_of(&self, price: f64) -> usize {
        let k = self.edges.partition_point(|&e| e < price);
        k.min(self.n_bins() - 1)
    }

    /// Price at which the mass of bin `k` is concentrated.
    pub fn representative_price(&self, k: usize) -> f64 {
        if k == 0 {
            self.edges[0]
        } else {
            (self.edges[k - 1] * self.edges[k]).sqrt()
        }
    }
}

/// Discretized distribution of the highest competing bid.
#[derive(Debug, Clone, PartialEq)]
pub struct BidLandscape {
    grid: Arc<PriceGrid>,
    cdf: Vec<f64>,
    mass: Vec<f64>,
    reps: Vec<f64>,
    /// `cum_spend[k] = Σ_{j≤k} mass_j · rep_j`
    cum_spend: Vec<f64>,
}

const MASS_TOL: f64 = 1e-9;

impl BidLandscape {
    /// Builds a landscape from per-edge cumulative probabilities.
    pub fn from_cdf(grid: Arc<PriceGrid>, cdf: Vec<f64>) -> Result<Self> {
        let n = grid.n_bins();
        if cdf.len() != n {
            return Err(invalid(format!(
                "cdf has {} values for a grid of {n} bins",
                cdf.len()
            )));
        }
        let mut prev = 0.0;
        for (k, &c) in cdf.iter().enumerate() {
            if !c.is_finite() || !(0.0..=1.0).contains(&c) {
                return Err(invalid(format!("cdf[{k}] = {c} outside [0, 1]")));
            }
            if c < prev {
                return Err(invalid(format!(
                    "cdf decreases at bin {k}: {prev} -> {c}"
                )));
            }
            prev = c;
        }
        if (cdf[n - 1] - 1.0).abs() > MASS_TOL {
            return Err(invalid(format!(
                "cdf at max price must be 1, got {}",
                cdf[n - 1]
            )));
        }
        let mut mass = Vec::with_capacity(n);
        let mut prev = 0.0;
        for &c in &cdf {
            mass.push(c - prev);
            prev = c;
        }
        let reps: Vec<f64> = (0..n).map(|k| grid.representative_price(k)).collect();
        let mut cum_spend = Vec::with_capacity(n);
        let mut acc = 0.0;
        for (m, r) in mass.iter().zip(&reps) {
            acc += m * r;
            cum_spend.push(acc);
        }
        Ok(Self {
            grid,
            cdf,
            mass,
            reps,
            cum_spend,
        })
    }

    /// Empirical landscape of observed winning bids; samples outside the grid
    /// are clamped into the first or last bin.
    pub fn from_samples(winning_bids: &[f64], grid: Arc<PriceGrid>) -> Result<Self> {
        if winning_bids.is_empty() {
            return Err(invalid("landscape_from_samples needs at least one sample"));
        }
        let mut counts = vec![0usize; grid.n_bins()];
        for &b in winning_bids {
            if !b.is_finite() {
                return Err(invalid(format!("non-finite winning bid {b}")));
            }
            counts[grid.bin_of(b)] += 1;
        }
        let total = winning_bids.len() as f64;
        let mut acc = 0usize;
        let cdf = counts
            .iter()
            .map(|&c| {
                acc += c;
                acc as f64 / total
            })
            .collect();
        Self::from_cdf(grid, cdf)
    }

    /// Point masses `(price, probability)` assigned to the bins holding them.
    pub fn from_atoms(grid: Arc<PriceGrid>, atoms: &[(f64, f64)]) -> Result<Self> {
        let total: f64 = atoms.iter().map(|a| a.1).sum();
        if atoms.is_empty() || (total - 1.0).abs() > MASS_TOL {
            return Err(invalid(format!("atom probabilities sum to {total}, expected 1")));
        }
        let mut mass = vec![0.0; grid.n_bins()];
        for &(price, p) in atoms {
            if p < 0.0 {
                return Err(invalid(format!("negative atom probability {p}")));
            }
            mass[grid.bin_of(price)] += p;
        }
        let mut acc = 0.0;
        let mut cdf: Vec<f64> = mass
            .iter()
            .map(|m| {
                acc += m;
                acc.min(1.0)
            })
            .collect();
        *cdf.last_mut().unwrap() = 1.0;
        Self::from_cdf(grid, cdf)
    }

    /// Log-normal winning prices with the given median and log-scale width.
    /// Mass below the grid lands in the first bin, mass above in the last.
    pub fn lognormal(grid: Arc<PriceGrid>, median: f64, log_sd: f64) -> Result<Self> {
        if !(median > 0.0) || !(log_sd > 0.0) {
            return Err(invalid(format!(
                "lognormal landscape needs positive median and width, got {median}, {log_sd}"
            )));
        }
        let n = grid.n_bins();
        let mut cdf: Vec<f64> = grid
            .edges()
            .iter()
            .map(|&e| std_normal_cdf((e / median).ln() / log_sd))
            .collect();
        cdf[n - 1] = 1.0;
        Self::from_cdf(grid, cdf)
    }

    pub fn grid(&self) -> &Arc<PriceGrid> {
        &self.grid
    }

    /// Cumulative win probability at each grid edge.
    pub fn cdf(&self) -> &[f64] {
        &self.cdf
    }

    /// Probability mass per bin.
    pub fn mass(&self) -> &[f64] {
        &self.mass
    }

    pub fn representative_prices(&self) -> &[f64] {
        &self.reps
    }

    /// Number of atoms won by `bid` (ties win).
    fn won_bins(&self, bid: f64) -> usize {
        self.reps.partition_point(|&r| r <= bid)
    }

    /// Win probability F(bid): right-continuous, 0 below the grid and 1 at or
    /// above the top atom.
    pub fn cdf_at(&self, bid: f64) -> Result<f64> {
        if bid < 0.0 || bid.is_nan() {
            return Err(invalid(format!("bid must be non-negative, got {bid}")));
        }
        Ok(self.win_prob(bid))
    }

    fn win_prob(&self, bid: f64) -> f64 {
        match self.won_bins(bid) {
            0 => 0.0,
            k => self.cdf[k - 1],
        }
    }

    fn unit_spend(&self, bid: f64) -> f64 {
        match self.won_bins(bid) {
            0 => 0.0,
            k => self.cum_spend[k - 1],
        }
    }

    /// `intensity · F(bid)`.
    pub fn expected_volume(&self, intensity: f64, bid: f64) -> Result<f64> {
        check_intensity(intensity)?;
        Ok(intensity * self.cdf_at(bid)?)
    }

    /// `intensity · ∫₀^bid b f(b) db` with the bin atoms as the integration nodes.
    pub fn expected_spend(&self, intensity: f64, bid: f64) -> Result<f64> {
        check_intensity(intensity)?;
        self.cdf_at(bid)?;
        Ok(intensity * self.unit_spend(bid))
    }

    /// Mean winning price.
    pub fn mean_price(&self) -> f64 {
        *self.cum_spend.last().unwrap()
    }

    /// Draws a winning price.
    pub fn sample_price<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.gen();
        let k = self.cdf.partition_point(|&c| c <= u).min(self.reps.len() - 1);
        self.reps[k]
    }
}

fn check_intensity(intensity: f64) -> Result<()> {
    if intensity < 0.0 || intensity.is_nan() {
        return Err(invalid(format!("intensity must be non-negative, got {intensity}")));
    }
    Ok(())
}

pub fn std_normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

pub(crate) fn std_normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Distribution of the submitted bid around a control level `cv`; every
/// family has mean `cv`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum BidNoise {
    /// Bid exactly `cv`.
    Dirac,
    /// Gamma with the given shape and scale `cv / shape`.
    Gamma { shape: f64 },
    /// Log-normal with log-scale width `sigma` and mean `cv`.
    Lognormal { sigma: f64 },
}

impl Default for BidNoise {
    fn default() -> Self {
        BidNoise::Gamma { shape: 4.0 }
    }
}

impl BidNoise {
    pub fn validate(&self) -> Result<()> {
        match *self {
            BidNoise::Dirac => Ok(()),
            BidNoise::Gamma { shape } if shape > 0.0 && shape.is_finite() => Ok(()),
            BidNoise::Lognormal { sigma } if sigma > 0.0 && sigma.is_finite() => Ok(()),
            other => Err(invalid(format!("degenerate bid noise {other:?}"))),
        }
    }

    /// Rough log-scale width, used to size interpolation tables.
    fn log_width(&self) -> f64 {
        match *self {
            BidNoise::Dirac => 0.0,
            BidNoise::Gamma { shape } => 1.0 / shape.sqrt(),
            BidNoise::Lognormal { sigma } => sigma,
        }
    }

    /// `P(bid ≥ price)` for a control level `cv > 0`, and its derivative with
    /// respect to `ln cv`.
    pub fn survival(&self, price: f64, cv: f64) -> (f64, f64) {
        match *self {
            BidNoise::Dirac => (if cv >= price { 1.0 } else { 0.0 }, 0.0),
            BidNoise::Gamma { shape } => {
                let x = shape * price / cv;
                let s = gamma_ur(shape, x);
                let ds = (shape * x.ln() - x - ln_gamma(shape)).exp();
                (s, ds)
            }
            BidNoise::Lognormal { sigma } => {
                let z = (cv.ln() - 0.5 * sigma * sigma - price.ln()) / sigma;
                (std_normal_cdf(z), std_normal_pdf(z) / sigma)
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, cv: f64, rng: &mut R) -> f64 {
        if cv <= 0.0 {
            return 0.0;
        }
        match *self {
            BidNoise::Dirac => cv,
            BidNoise::Gamma { shape } => Gamma::new(shape, cv / shape)
                .expect("validated gamma noise")
                .sample(rng),
            BidNoise::Lognormal { sigma } => LogNormal::new(cv.ln() - 0.5 * sigma * sigma, sigma)
                .expect("validated lognormal noise")
                .sample(rng),
        }
    }
}

/// Value and bid-derivative of the per-impression response to a bid level.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ResponsePoint {
    /// Win probability.
    pub win: f64,
    pub dwin: f64,
    /// Expected payment per available impression.
    pub spend: f64,
    pub dspend: f64,
}

/// Market response per available impression as a function of the bid level.
pub trait Response: Send + Sync + std::fmt::Debug {
    fn eval(&self, bid: f64) -> ResponsePoint;

    /// Simulates one auction at control level `bid`; returns the price paid
    /// when the auction is won.
    fn sample_win(&self, bid: f64, rng: &mut dyn rand::RngCore) -> Option<f64>;

    fn win_prob(&self, bid: f64) -> f64 {
        self.eval(bid).win
    }
}

impl Response for BidLandscape {
    fn eval(&self, bid: f64) -> ResponsePoint {
        let k = self.won_bins(bid);
        if k == 0 {
            return ResponsePoint::default();
        }
        ResponsePoint {
            win: self.cdf[k - 1],
            dwin: 0.0,
            spend: self.cum_spend[k - 1],
            dspend: 0.0,
        }
    }

    fn sample_win(&self, bid: f64, rng: &mut dyn rand::RngCore) -> Option<f64> {
        let price = self.sample_price(rng);
        (bid >= price).then_some(price)
    }
}

/// Response of a landscape to bids randomized around the control level.
#[derive(Debug, Clone)]
pub struct SmoothedLandscape {
    landscape: Arc<BidLandscape>,
    noise: BidNoise,
    levels: Vec<f64>,
    table: Option<HermiteTable>,
}

/// Smooths `landscape` by the bid-noise family: `F̃(cv) = E[F(b)]` and the
/// matching spend, for bids `b` drawn with mean `cv`.
pub fn smooth_landscape(landscape: &BidLandscape, noise: BidNoise) -> Result<SmoothedLandscape> {
    SmoothedLandscape::new(Arc::new(landscape.clone()), noise)
}

impl SmoothedLandscape {
    pub fn new(landscape: Arc<BidLandscape>, noise: BidNoise) -> Result<Self> {
        noise.validate()?;
        let levels = match noise {
            BidNoise::Dirac => landscape.cdf.clone(),
            _ => landscape
                .grid
                .edges()
                .iter()
                .map(|&cv| exact_response(&landscape, &noise, cv.ln()).0)
                .collect(),
        };
        let table = match noise {
            BidNoise::Dirac => None,
            _ => Some(HermiteTable::build(&landscape, &noise)),
        };
        Ok(Self {
            landscape,
            noise,
            levels,
            table,
        })
    }

    pub fn landscape(&self) -> &Arc<BidLandscape> {
        &self.landscape
    }

    pub fn noise(&self) -> BidNoise {
        self.noise
    }

    /// Smoothed win probability at each grid level; bit-equal to the raw CDF
    /// under Dirac noise.
    pub fn win_at_levels(&self) -> &[f64] {
        &self.levels
    }

    /// Smoothed win probability and spend evaluated by direct summation,
    /// without the interpolation table.
    pub fn eval_exact(&self, cv: f64) -> ResponsePoint {
        if cv <= 0.0 {
            return ResponsePoint::default();
        }
        if let BidNoise::Dirac = self.noise {
            return self.landscape.eval(cv);
        }
        let (win, dwin_du, spend, dspend_du) = exact_response(&self.landscape, &self.noise, cv.ln());
        ResponsePoint {
            win,
            dwin: dwin_du / cv,
            spend,
            dspend: dspend_du / cv,
        }
    }
}

/// Sums survival probabilities over the landscape atoms at `u = ln cv`.
/// Returns `(win, dwin/du, spend, dspend/du)`.
fn exact_response(landscape: &BidLandscape, noise: &BidNoise, u: f64) -> (f64, f64, f64, f64) {
    let cv = u.exp();
    let mut out = (0.0, 0.0, 0.0, 0.0);
    for (&m, &p) in landscape.mass.iter().zip(&landscape.reps) {
        if m == 0.0 {
            continue;
        }
        let (s, ds) = noise.survival(p, cv);
        out.0 += m * s;
        out.1 += m * ds;
        out.2 += m * p * s;
        out.3 += m * p * ds;
    }
    out
}

impl Response for SmoothedLandscape {
    fn eval(&self, bid: f64) -> ResponsePoint {
        match &self.table {
            None => self.landscape.eval(bid),
            Some(t) => t.eval(bid),
        }
    }

    fn sample_win(&self, bid: f64, rng: &mut dyn rand::RngCore) -> Option<f64> {
        let price = self.landscape.sample_price(rng);
        let b = self.noise.sample(bid, rng);
        (b >= price).then_some(price)
    }
}

/// Cubic Hermite interpolation of the smoothed response in `ln cv`, using
/// exact node derivatives so the interpolant is C¹.
#[derive(Debug, Clone)]
struct HermiteTable {
    u0: f64,
    h: f64,
    /// (win, dwin/du, spend, dspend/du) per node
    nodes: Vec<[f64; 4]>,
}

const TABLE_STEP: f64 = 0.02;

impl HermiteTable {
    fn build(landscape: &BidLandscape, noise: &BidNoise) -> Self {
        let grid = landscape.grid();
        let pad = (6.0 * noise.log_width()).max(std::f64::consts::LN_10);
        let lo = grid.min_price().ln() - pad;
        let hi = grid.max_price().ln() + pad;
        let n = ((hi - lo) / TABLE_STEP).ceil() as usize + 1;
        let h = (hi - lo) / (n - 1) as f64;
        let nodes = (0..n)
            .map(|i| {
                let (w, dw, s, ds) = exact_response(landscape, noise, lo + i as f64 * h);
                [w, dw, s, ds]
            })
            .collect();
        Self { u0: lo, h, nodes }
    }

    fn eval(&self, cv: f64) -> ResponsePoint {
        if cv <= 0.0 {
            return ResponsePoint::default();
        }
        let u = cv.ln();
        let x = (u - self.u0) / self.h;
        let last = self.nodes.len() - 1;
        if x < 0.0 {
            // Linear to the origin below the table.
            let c0 = self.u0.exp();
            let n = &self.nodes[0];
            return ResponsePoint {
                win: n[0] * cv / c0,
                dwin: n[0] / c0,
                spend: n[2] * cv / c0,
                dspend: n[2] / c0,
            };
        }
        if x >= last as f64 {
            let n = &self.nodes[last];
            return ResponsePoint {
                win: n[0],
                dwin: 0.0,
                spend: n[2],
                dspend: 0.0,
            };
        }
        let i = x.floor() as usize;
        let t = x - i as f64;
        let (a, b) = (&self.nodes[i], &self.nodes[i + 1]);
        let (win, dwin) = hermite(a[0], a[1], b[0], b[1], self.h, t);
        let (spend, dspend) = hermite(a[2], a[3], b[2], b[3], self.h, t);
        ResponsePoint {
            win,
            dwin: dwin / cv,
            spend,
            dspend: dspend / cv,
        }
    }
}

/// Hermite segment value and derivative with respect to the outer variable.
fn hermite(y0: f64, m0: f64, y1: f64, m1: f64, h: f64, t: f64) -> (f64, f64) {
    let t2 = t * t;
    let t3 = t2 * t;
    let h00 = 2.0 * t3 - 3.0 * t2 + 1.0;
    let h10 = t3 - 2.0 * t2 + t;
    let h01 = -2.0 * t3 + 3.0 * t2;
    let h11 = t3 - t2;
    let value = h00 * y0 + h10 * h * m0 + h01 * y1 + h11 * h * m1;
    let d00 = 6.0 * t2 - 6.0 * t;
    let d10 = 3.0 * t2 - 4.0 * t + 1.0;
    let d01 = -6.0 * t2 + 6.0 * t;
    let d11 = 3.0 * t2 - 2.0 * t;
    let deriv = (d00 * y0 + d01 * y1) / h + d10 * m0 + d11 * m1;
    (value, deriv)
}

/// Gaussian winning-price distribution, `F(a) = Φ((a − mean)/sd)`, used by
/// the continuous-time solvers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianResponse {
    pub mean: f64,
    pub sd: f64,
}

impl GaussianResponse {
    pub fn new(mean: f64, sd: f64) -> Result<Self> {
        if !(sd > 0.0) || !mean.is_finite() {
            return Err(invalid(format!("gaussian response needs sd > 0, got {sd}")));
        }
        Ok(Self { mean, sd })
    }
}

impl Response for GaussianResponse {
    fn eval(&self, bid: f64) -> ResponsePoint {
        let z = (bid - self.mean) / self.sd;
        let z0 = -self.mean / self.sd;
        let (cz, pz) = (std_normal_cdf(z), std_normal_pdf(z));
        let (c0, p0) = (std_normal_cdf(z0), std_normal_pdf(z0));
        // ∫₀^a b f(b) db
        let spend = if bid <= 0.0 {
            0.0
        } else {
            self.mean * (cz - c0) - self.sd * (pz - p0)
        };
        ResponsePoint {
            win: cz,
            dwin: pz / self.sd,
            spend,
            dspend: if bid <= 0.0 { 0.0 } else { bid * pz / self.sd },
        }
    }

    fn sample_win(&self, bid: f64, rng: &mut dyn rand::RngCore) -> Option<f64> {
        let price: f64 = Normal::new(self.mean, self.sd).unwrap().sample(rng);
        (bid >= price).then_some(price.max(0.0))
    }
}

/// A response whose price axis is scaled by a constant factor:
/// `F(a) = F_base(a / scale)`, spend scales with the price level.
#[derive(Debug, Clone)]
pub struct ScaledResponse {
    pub base: Arc<dyn Response>,
    pub scale: f64,
}

impl Response for ScaledResponse {
    fn eval(&self, bid: f64) -> ResponsePoint {
        let p = self.base.eval(bid / self.scale);
        ResponsePoint {
            win: p.win,
            dwin: p.dwin / self.scale,
            spend: p.spend * self.scale,
            dspend: p.dspend,
        }
    }

    fn sample_win(&self, bid: f64, rng: &mut dyn rand::RngCore) -> Option<f64> {
        self.base
            .sample_win(bid / self.scale, rng)
            .map(|p| p * self.scale)
    }
}

/// Serializes a sequence of per-period landscapes sharing one grid.
pub fn write_landscape_csv(grid: &PriceGrid, periods: &[BidLandscape]) -> String {
    let n = grid.n_bins();
    let mut out = String::new();
    writeln!(out, "grid,min,max,n_bins").unwrap();
    writeln!(out, "grid,{},{},{}", grid.min_price(), grid.max_price(), n).unwrap();
    out.push_str("period_index");
    for k in 0..n {
        write!(out, ",cdf_bin_{k}").unwrap();
    }
    out.push('\n');
    for (t, l) in periods.iter().enumerate() {
        write!(out, "{t}").unwrap();
        for c in l.cdf() {
            write!(out, ",{c}").unwrap();
        }
        out.push('\n');
    }
    out
}

/// Parses the format written by [`write_landscape_csv`].
pub fn read_landscape_csv(text: &str) -> Result<(Arc<PriceGrid>, Vec<BidLandscape>)> {
    let ctx = "landscape csv";
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let names = lines.next().ok_or_else(|| parse_err(ctx, "empty file"))?;
    if names.trim() != "grid,min,max,n_bins" {
        return Err(parse_err(ctx, format!("unexpected header {names:?}")));
    }
    let vals: Vec<&str> = lines
        .next()
        .ok_or_else(|| parse_err(ctx, "missing grid row"))?
        .split(',')
        .collect();
    if vals.len() != 4 || vals[0] != "grid" {
        return Err(parse_err(ctx, "malformed grid row"));
    }
    let min: f64 = parse_f64(vals[1], ctx)?;
    let max: f64 = parse_f64(vals[2], ctx)?;
    let n: usize = vals[3]
        .trim()
        .parse()
        .map_err(|e| parse_err(ctx, format!("n_bins: {e}")))?;
    let grid = Arc::new(PriceGrid::geometric(min, max, n)?);
    let columns = lines.next().ok_or_else(|| parse_err(ctx, "missing column row"))?;
    if !columns.starts_with("period_index") {
        return Err(parse_err(ctx, "missing period_index column header"));
    }
    let mut periods = Vec::new();
    for (row, line) in lines.enumerate() {
        let mut fields = line.split(',');
        let idx: usize = fields
            .next()
            .unwrap()
            .trim()
            .parse()
            .map_err(|e| parse_err(ctx, format!("row {row} period index: {e}")))?;
        if idx != row {
            return Err(parse_err(ctx, format!("period index {idx} out of order at row {row}")));
        }
        let cdf = fields.map(|f| parse_f64(f, ctx)).collect::<Result<Vec<_>>>()?;
        periods.push(BidLandscape::from_cdf(grid.clone(), cdf)?);
    }
    Ok((grid, periods))
}

pub(crate) fn parse_f64(s: &str, ctx: &str) -> Result<f64> {
    s.trim()
        .parse()
        .map_err(|e| parse_err(ctx, format!("{s:?}: {e}")))
}
