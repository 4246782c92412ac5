//! Exponential retention curve and its constrained fit.
//!
//! The curve is `O(i) = amp · exp(−rate · (i − center)) + floor` over 0-based
//! layer index `i`. A fit minimizes squared error to a normalized
//! information-contribution profile plus a smoothness penalty on forward
//! differences, subject to box bounds and the global retention equality
//! `mean_i clamp(O(i), 0, 1) = g*`.

pub mod sqp;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{config, contract, Error, Result};
use crate::numcore::Rng;
use sqp::{Constraint, Nlp, SqpOptions};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub amp: f64,
    pub rate: f64,
    pub center: f64,
    pub floor: f64,
}

impl ScheduleParams {
    fn to_vec(self) -> [f64; 4] {
        [self.amp, self.rate, self.center, self.floor]
    }

    fn from_slice(x: &[f64]) -> Self {
        Self {
            amp: x[0],
            rate: x[1],
            center: x[2],
            floor: x[3],
        }
    }
}

/// `[lo, hi]` per parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bounds {
    pub amp: [f64; 2],
    pub rate: [f64; 2],
    pub center: [f64; 2],
    pub floor: [f64; 2],
}

impl Bounds {
    pub fn default_for(n_layers: usize) -> Self {
        Self {
            amp: [0.5, 1.2],
            rate: [0.01, 2.0],
            center: [0.0, n_layers as f64],
            floor: [0.0, 1.0],
        }
    }

    fn lower(&self) -> [f64; 4] {
        [self.amp[0], self.rate[0], self.center[0], self.floor[0]]
    }

    fn upper(&self) -> [f64; 4] {
        [self.amp[1], self.rate[1], self.center[1], self.floor[1]]
    }

    pub fn validate(&self) -> Result<()> {
        for (name, [lo, hi]) in [
            ("amp", self.amp),
            ("rate", self.rate),
            ("center", self.center),
            ("floor", self.floor),
        ] {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(config(format!("{name} bounds must be finite with lo ≤ hi")));
            }
        }
        if self.amp[0] <= 0.0 || self.rate[0] < 0.0 {
            return Err(config("amp lower bound must be > 0 and rate lower bound ≥ 0"));
        }
        Ok(())
    }

    pub fn contains(&self, p: &ScheduleParams) -> bool {
        let (lo, hi, x) = (self.lower(), self.upper(), p.to_vec());
        (0..4).all(|j| x[j] >= lo[j] && x[j] <= hi[j])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitProblem {
    pub i_norm: Vec<f64>,
    pub lambda_smooth: f64,
    pub target_retention: f64,
    pub bounds: Bounds,
    pub n_spatial: usize,
    /// Seed for the multi-start points.
    pub seed: u64,
}

impl FitProblem {
    pub fn new(i_norm: Vec<f64>, target_retention: f64, n_spatial: usize) -> Self {
        let n = i_norm.len();
        Self {
            i_norm,
            lambda_smooth: 1.0,
            target_retention,
            bounds: Bounds::default_for(n),
            n_spatial,
            seed: 0,
        }
    }

    pub fn n_layers(&self) -> usize {
        self.i_norm.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.i_norm.len() < 2 {
            return Err(config("fit needs at least two layers"));
        }
        if self.i_norm.iter().any(|v| !v.is_finite()) {
            return Err(config("i_norm must be finite"));
        }
        if !(self.lambda_smooth >= 0.0 && self.lambda_smooth.is_finite()) {
            return Err(config("lambda_smooth must be finite and ≥ 0"));
        }
        if !(self.target_retention > 0.0 && self.target_retention <= 1.0) {
            return Err(config(format!(
                "target_retention must be in (0, 1], got {}",
                self.target_retention
            )));
        }
        if self.n_spatial == 0 {
            return Err(config("n_spatial must be ≥ 1"));
        }
        self.bounds.validate()
    }
}

pub fn o_pre(p: &ScheduleParams, layer: f64) -> f64 {
    p.amp * (-p.rate * (layer - p.center)).exp() + p.floor
}

/// `O(i)` and its gradient in `(amp, rate, center, floor)`.
fn o_pre_grad(p: &ScheduleParams, i: f64) -> (f64, [f64; 4]) {
    let e = (-p.rate * (i - p.center)).exp();
    let ae = p.amp * e;
    (ae + p.floor, [e, -(i - p.center) * ae, p.rate * ae, 1.0])
}

/// Data plus smoothness loss and its analytic gradient.
pub fn fit_loss(p: &ScheduleParams, problem: &FitProblem) -> (f64, [f64; 4]) {
    let n = problem.n_layers();
    let mut r = Vec::with_capacity(n);
    let mut dr = Vec::with_capacity(n);
    for (i, &target) in problem.i_norm.iter().enumerate() {
        let (o, g) = o_pre_grad(p, i as f64);
        r.push(o - target);
        dr.push(g);
    }
    let mut loss = 0.0;
    let mut grad = [0.0; 4];
    for i in 0..n {
        loss += r[i] * r[i];
        for k in 0..4 {
            grad[k] += 2.0 * r[i] * dr[i][k];
        }
    }
    let lam = problem.lambda_smooth;
    if lam != 0.0 {
        for i in 0..n - 1 {
            let diff = r[i + 1] - r[i];
            loss += lam * diff * diff;
            for k in 0..4 {
                grad[k] += 2.0 * lam * diff * (dr[i + 1][k] - dr[i][k]);
            }
        }
    }
    (loss, grad)
}

/// Layer-averaged clamped ratio.
pub fn global_retention(p: &ScheduleParams, n_layers: usize) -> f64 {
    (0..n_layers)
        .map(|i| o_pre(p, i as f64).clamp(0.0, 1.0))
        .sum::<f64>()
        / n_layers as f64
}

fn global_retention_grad(p: &ScheduleParams, n_layers: usize) -> (f64, [f64; 4]) {
    let mut total = 0.0;
    let mut grad = [0.0; 4];
    for i in 0..n_layers {
        let (o, g) = o_pre_grad(p, i as f64);
        total += o.clamp(0.0, 1.0);
        if o > 0.0 && o < 1.0 {
            for k in 0..4 {
                grad[k] += g[k];
            }
        }
    }
    let n = n_layers as f64;
    (total / n, grad.map(|v| v / n))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetentionSchedule {
    pub label: String,
    pub params: Option<ScheduleParams>,
    pub ratios: Vec<f64>,
    pub keep_counts: Vec<usize>,
    pub achieved_retention: f64,
    pub converged: bool,
    pub n_spatial: usize,
    pub loss: Option<f64>,
    pub kkt_residual: Option<f64>,
    pub iterations: Option<usize>,
}

/// `ceil(ratio · n_spatial)` per layer, then a running minimum.
pub fn keep_counts(ratios: &[f64], n_spatial: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(ratios.len());
    let mut cap = n_spatial;
    for &r in ratios {
        let k = ((r.clamp(0.0, 1.0) * n_spatial as f64).ceil() as usize).min(cap);
        cap = k;
        out.push(k);
    }
    out
}

impl RetentionSchedule {
    pub fn from_ratios(label: impl Into<String>, ratios: Vec<f64>, n_spatial: usize) -> Result<Self> {
        if ratios.is_empty() {
            return Err(contract("schedule needs at least one layer"));
        }
        if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(config("retention ratios must lie in [0, 1]"));
        }
        let keep = keep_counts(&ratios, n_spatial);
        let achieved = ratios.iter().sum::<f64>() / ratios.len() as f64;
        Ok(Self {
            label: label.into(),
            params: None,
            ratios,
            keep_counts: keep,
            achieved_retention: achieved,
            converged: true,
            n_spatial,
            loss: None,
            kkt_residual: None,
            iterations: None,
        })
    }

    pub fn all_keep(n_layers: usize, n_spatial: usize) -> Self {
        Self::from_ratios("vanilla", vec![1.0; n_layers], n_spatial).expect("valid ratios")
    }

    pub fn n_layers(&self) -> usize {
        self.ratios.len()
    }

    /// Realized layer-averaged kept fraction from the integer counts.
    pub fn realized_retention(&self) -> f64 {
        self.keep_counts.iter().sum::<usize>() as f64 / (self.n_layers() * self.n_spatial) as f64
    }
}

/// The fit in unit-box coordinates `x = lo + u · (hi − lo)`, which keeps the
/// quasi-Newton matrix well scaled across parameters of very different range.
struct Fit<'a> {
    problem: &'a FitProblem,
    offset: [f64; 4],
    width: [f64; 4],
    constrained: bool,
    /// `g* = 1` is handled as `O(n−1) ≥ 1`.
    saturating: bool,
}

const UNIT_LO: [f64; 4] = [0.0; 4];
const UNIT_HI: [f64; 4] = [1.0; 4];

impl Fit<'_> {
    fn params(&self, u: &[f64]) -> ScheduleParams {
        let x: [f64; 4] = std::array::from_fn(|j| self.offset[j] + u[j] * self.width[j]);
        ScheduleParams::from_slice(&x)
    }

    fn unit(&self, x: &[f64; 4]) -> [f64; 4] {
        std::array::from_fn(|j| {
            if self.width[j] > 0.0 {
                (x[j] - self.offset[j]) / self.width[j]
            } else {
                0.0
            }
        })
    }

    fn chain(&self, g: [f64; 4]) -> Vec<f64> {
        (0..4).map(|j| g[j] * self.width[j]).collect()
    }
}

impl Nlp for Fit<'_> {
    fn lower(&self) -> &[f64] {
        &UNIT_LO
    }

    fn upper(&self) -> &[f64] {
        &UNIT_HI
    }

    fn objective(&self, u: &[f64]) -> (f64, Vec<f64>) {
        let (l, g) = fit_loss(&self.params(u), self.problem);
        (l, self.chain(g))
    }

    fn constraints(&self, u: &[f64]) -> Vec<Constraint> {
        if !self.constrained {
            return Vec::new();
        }
        let p = self.params(u);
        let n = self.problem.n_layers();
        if self.saturating {
            let (o, g) = o_pre_grad(&p, (n - 1) as f64);
            return vec![Constraint {
                value: o - 1.0,
                grad: self.chain(g),
                equality: false,
            }];
        }
        let (gr, g) = global_retention_grad(&p, n);
        vec![Constraint {
            value: gr - self.problem.target_retention,
            grad: self.chain(g),
            equality: true,
        }]
    }
}

/// A layer whose unclamped ratio is this close to 0 or 1 sits on a kink of
/// the retention constraint.
const KINK_TOL: f64 = 1e-7;
const MAX_KINKS: usize = 4;
const ACTIVE_TOL: f64 = 1e-10;

impl Fit<'_> {
    /// Stationarity residual at `u` allowing the clamp derivative of each kink
    /// layer to take any value in `[0, 1]`, i.e. the residual of the KKT
    /// conditions with the Clarke subdifferential of the retention. `None`
    /// when there is no kink or too many to enumerate.
    fn kink_residual(&self, u: &[f64]) -> Option<f64> {
        let p = self.params(u);
        let n = self.problem.n_layers();
        let mut smooth = [0.0; 4];
        let mut kinks: Vec<Vec<f64>> = Vec::new();
        for i in 0..n {
            let (o, g) = o_pre_grad(&p, i as f64);
            let d = self.chain(g.map(|v| v / n as f64));
            if (o - 1.0).abs() <= KINK_TOL || o.abs() <= KINK_TOL {
                kinks.push(d);
            } else if o > 0.0 && o < 1.0 {
                for j in 0..4 {
                    smooth[j] += d[j];
                }
            }
        }
        if kinks.is_empty() || kinks.len() > MAX_KINKS {
            return None;
        }
        let (_, gf) = self.objective(u);
        let free: Vec<usize> = (0..4).filter(|&j| u[j] > ACTIVE_TOL && u[j] < 1.0 - ACTIVE_TOL).collect();
        let mut best = f64::INFINITY;
        // Each kink: derivative 0, derivative 1, or a free value in between.
        for code in 0..3usize.pow(kinks.len() as u32) {
            let status: Vec<usize> = (0..kinks.len()).map(|k| code / 3usize.pow(k as u32) % 3).collect();
            let mut base = smooth;
            let mut cols = Vec::new();
            for (k, d) in kinks.iter().enumerate() {
                match status[k] {
                    1 => (0..4).for_each(|j| base[j] += d[j]),
                    2 => cols.push(d.clone()),
                    _ => {}
                }
            }
            // Unknowns: λ for `base`, then w_k = λ·θ_k for free kinks.
            let mut columns = vec![base.to_vec()];
            columns.extend(cols);
            let m = columns.len();
            if free.len() < m {
                continue;
            }
            let mut ata = crate::numcore::Matrix::zeros(m, m);
            let mut atb = vec![0.0; m];
            for a in 0..m {
                for &j in &free {
                    atb[a] += columns[a][j] * gf[j];
                }
                for b in 0..m {
                    let v: f64 = free.iter().map(|&j| columns[a][j] * columns[b][j]).sum();
                    ata.set(a, b, v);
                }
            }
            let Some(coef) = crate::numcore::solve_linear(&ata, &atb) else {
                continue;
            };
            let lambda = coef[0];
            if coef[1..].iter().any(|&w| {
                let theta = if lambda != 0.0 { w / lambda } else { f64::NAN };
                !(-1e-9..=1.0 + 1e-9).contains(&theta)
            }) {
                continue;
            }
            let mut res: f64 = 0.0;
            for j in 0..4 {
                let r = gf[j] - (0..m).map(|a| coef[a] * columns[a][j]).sum::<f64>();
                let viol = if u[j] <= ACTIVE_TOL {
                    (-r).max(0.0)
                } else if u[j] >= 1.0 - ACTIVE_TOL {
                    r.max(0.0)
                } else {
                    r.abs()
                };
                res = res.max(viol);
            }
            best = best.min(res);
        }
        Some(best)
    }
}

const N_STARTS: u64 = 8;
const SATURATION_EPS: f64 = 1e-12;

/// Corners of the box where the global retention is smallest and largest.
fn retention_corners(b: &Bounds) -> ([f64; 4], [f64; 4]) {
    (
        [b.amp[0], b.rate[1], b.center[0], b.floor[0]],
        [b.amp[1], b.rate[0], b.center[1], b.floor[1]],
    )
}

/// Moves `x` along the segment toward the max or min retention corner until
/// the constraint holds. Retention is monotone along that segment.
fn make_feasible(x: [f64; 4], problem: &FitProblem) -> [f64; 4] {
    let n = problem.n_layers();
    let g = |v: &[f64; 4]| global_retention(&ScheduleParams::from_slice(v), n);
    let target = problem.target_retention;
    let (cmin, cmax) = retention_corners(&problem.bounds);
    let corner = if g(&x) < target { cmax } else { cmin };
    let at = |t: f64| -> [f64; 4] { std::array::from_fn(|j| x[j] + t * (corner[j] - x[j])) };
    let below = g(&x) < target;
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if (g(&at(mid)) < target) == below {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    at(hi)
}

fn check_feasible(problem: &FitProblem) -> Result<()> {
    let n = problem.n_layers();
    let (cmin, cmax) = retention_corners(&problem.bounds);
    let gmin = global_retention(&ScheduleParams::from_slice(&cmin), n);
    let gmax = global_retention(&ScheduleParams::from_slice(&cmax), n);
    let g = problem.target_retention;
    let b = &problem.bounds;
    if g < gmin - 1e-12 {
        return Err(Error::Infeasible(format!(
            "target_retention {g} is below the minimum attainable {gmin:.6} \
             (amp lower bound {}, rate upper bound {}, center lower bound {}, floor lower bound {})",
            b.amp[0], b.rate[1], b.center[0], b.floor[0]
        )));
    }
    if g > gmax + 1e-12 {
        return Err(Error::Infeasible(format!(
            "target_retention {g} is above the maximum attainable {gmax:.6} \
             (amp upper bound {}, rate lower bound {}, center upper bound {}, floor upper bound {})",
            b.amp[1], b.rate[0], b.center[1], b.floor[1]
        )));
    }
    Ok(())
}

fn multi_start(problem: &FitProblem, constrained: bool) -> Result<(sqp::SqpResult, bool)> {
    problem.validate()?;
    let saturating = constrained && problem.target_retention >= 1.0 - SATURATION_EPS;
    if constrained {
        check_feasible(problem)?;
    }
    let (lo, hi) = (problem.bounds.lower(), problem.bounds.upper());
    let fit = Fit {
        problem,
        offset: lo,
        width: std::array::from_fn(|j| hi[j] - lo[j]),
        constrained,
        saturating,
    };
    let root = Rng::new(problem.seed);
    let runs: Vec<sqp::SqpResult> = (0..N_STARTS)
        .into_par_iter()
        .map(|k| {
            let mut rng = root.split(k);
            let mut x: [f64; 4] = std::array::from_fn(|j| rng.uniform(lo[j], hi[j]));
            if constrained && !saturating {
                x = make_feasible(x, problem);
            }
            let opts = SqpOptions::default();
            let mut res = sqp::minimize(&fit, &fit.unit(&x), opts);
            if !res.converged && constrained && !saturating && res.violation <= opts.tol {
                if let Some(r) = fit.kink_residual(&res.x) {
                    if r <= opts.tol {
                        res.converged = true;
                        res.kkt_residual = r;
                    }
                }
            }
            res.x = fit.params(&res.x).to_vec().to_vec();
            res
        })
        .collect();
    let feasible = |r: &sqp::SqpResult| r.violation <= 1e-8;
    let key = |r: &sqp::SqpResult| (!(r.converged && feasible(r)), !feasible(r), r.objective);
    let best = runs
        .into_iter()
        .min_by(|a, b| {
            let (ka, kb) = (key(a), key(b));
            ka.0.cmp(&kb.0)
                .then(ka.1.cmp(&kb.1))
                .then(ka.2.total_cmp(&kb.2))
        })
        .expect("at least one start");
    Ok((best, saturating))
}

fn schedule_from(problem: &FitProblem, res: sqp::SqpResult, label: &str) -> RetentionSchedule {
    let p = ScheduleParams::from_slice(&res.x);
    let ratios: Vec<f64> = (0..problem.n_layers())
        .map(|i| o_pre(&p, i as f64).clamp(0.0, 1.0))
        .collect();
    let keep = keep_counts(&ratios, problem.n_spatial);
    let achieved = ratios.iter().sum::<f64>() / ratios.len() as f64;
    RetentionSchedule {
        label: label.to_string(),
        params: Some(p),
        ratios,
        keep_counts: keep,
        achieved_retention: achieved,
        converged: res.converged,
        n_spatial: problem.n_spatial,
        loss: Some(res.objective),
        kkt_residual: Some(res.kkt_residual),
        iterations: Some(res.iterations),
    }
}

/// Constrained fit with multi-start SQP. A non-converged result is still
/// returned, with `converged = false`.
pub fn fit_schedule(problem: &FitProblem) -> Result<RetentionSchedule> {
    let (res, _) = multi_start(problem, true)?;
    Ok(schedule_from(problem, res, "adatoken"))
}

/// Same fit without the retention constraint (box bounds only).
pub fn fit_unconstrained(problem: &FitProblem) -> Result<RetentionSchedule> {
    let (res, _) = multi_start(problem, false)?;
    Ok(schedule_from(problem, res, "unconstrained"))
}

/// Baseline schedules.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BaselineKind {
    Uniform {
        ratio: f64,
    },
    /// `ratios[s]` applies from `stages[s−1]` (or 0) up to `stages[s]`.
    FixedStage {
        stages: Vec<usize>,
        ratios: Vec<f64>,
    },
    /// Keep everything before `layer`, then `ratio`.
    OneShot {
        layer: usize,
        ratio: f64,
    },
    /// Random non-increasing ratios whose mean is `retention`.
    Random {
        retention: f64,
        seed: u64,
    },
}

pub fn baseline_schedule(kind: &BaselineKind, n_layers: usize, n_spatial: usize) -> Result<RetentionSchedule> {
    if n_layers == 0 {
        return Err(config("baseline needs at least one layer"));
    }
    let (label, ratios) = match kind {
        BaselineKind::Uniform { ratio } => ("uniform", vec![*ratio; n_layers]),
        BaselineKind::FixedStage { stages, ratios } => {
            if ratios.len() != stages.len() + 1 {
                return Err(config("fixed_stage needs one more ratio than stage boundaries"));
            }
            if stages.iter().any(|&s| s == 0 || s >= n_layers) || stages.windows(2).any(|w| w[0] >= w[1]) {
                return Err(config(format!(
                    "fixed_stage boundaries must be strictly increasing in 1..{n_layers}"
                )));
            }
            let out = (0..n_layers)
                .map(|i| ratios[stages.iter().filter(|&&s| i >= s).count()])
                .collect();
            ("fixed_stage", out)
        }
        BaselineKind::OneShot { layer, ratio } => {
            if *layer > n_layers {
                return Err(config(format!("one_shot layer {layer} exceeds {n_layers} layers")));
            }
            let out = (0..n_layers).map(|i| if i < *layer { 1.0 } else { *ratio }).collect();
            ("one_shot", out)
        }
        BaselineKind::Random { retention, seed } => {
            if !(*retention > 0.0 && *retention <= 1.0) {
                return Err(config("random retention must be in (0, 1]"));
            }
            ("random", random_ratios(*retention, n_layers, &mut Rng::new(*seed)))
        }
    };
    RetentionSchedule::from_ratios(label, ratios, n_spatial)
}

/// Random draws, sorted descending and water-filled to mean `g` under a cap at 1.
fn random_ratios(g: f64, n: usize, rng: &mut Rng) -> Vec<f64> {
    let mut u: Vec<f64> = (0..n).map(|_| 1.0 - rng.next_f64()).collect();
    u.sort_by(|a, b| b.total_cmp(a));
    let mean = |s: f64| u.iter().map(|v| (s * v).min(1.0)).sum::<f64>() / n as f64;
    let (mut lo, mut hi) = (0.0, 1.0);
    while mean(hi) < g {
        hi *= 2.0;
        if hi > 1e12 {
            return vec![1.0; n];
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mean(mid) < g {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    u.iter().map(|v| (hi * v).min(1.0)).collect()
}

/// Equal-length stages with ratios `λ^s` (or `λ^{s+1}` below `1/n_stages`),
/// with `λ` chosen so the mean over layers is `g`.
pub fn fixed_stage_for_retention(g: f64, n_layers: usize, n_stages: usize) -> Result<BaselineKind> {
    if n_stages == 0 || n_stages > n_layers {
        return Err(config("n_stages must be in 1..=n_layers"));
    }
    if !(g > 0.0 && g <= 1.0) {
        return Err(config("retention must be in (0, 1]"));
    }
    let stages: Vec<usize> = (1..n_stages).map(|s| s * n_layers / n_stages).collect();
    let offset = if g < 1.0 / n_stages as f64 { 1 } else { 0 };
    let ratios_for = |lam: f64| -> Vec<f64> {
        (0..n_stages).map(|s| lam.powi((s + offset) as i32)).collect()
    };
    let mean = |lam: f64| -> f64 {
        let r = ratios_for(lam);
        (0..n_layers)
            .map(|i| r[stages.iter().filter(|&&s| i >= s).count()])
            .sum::<f64>()
            / n_layers as f64
    };
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mean(mid) < g {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(BaselineKind::FixedStage {
        stages,
        ratios: ratios_for(hi),
    })
}

/// One-shot baseline at `layer` whose mean retention is `g`.
pub fn one_shot_for_retention(g: f64, n_layers: usize, layer: usize) -> Result<BaselineKind> {
    if layer >= n_layers {
        return Err(config("one_shot layer must be below n_layers"));
    }
    let ratio = (n_layers as f64 * g - layer as f64) / (n_layers - layer) as f64;
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Infeasible(format!(
            "one_shot at layer {layer} cannot reach retention {g}"
        )));
    }
    Ok(BaselineKind::OneShot { layer, ratio })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Rng;
    use proptest::prelude::*;

    fn p(amp: f64, rate: f64, center: f64, floor: f64) -> ScheduleParams {
        ScheduleParams {
            amp,
            rate,
            center,
            floor,
        }
    }

    #[test]
    fn o_pre_examples() {
        let q = p(1.0, 0.1, 0.0, 0.1);
        assert!((o_pre(&q, 0.0) - 1.1).abs() < 1e-15);
        assert!((o_pre(&q, 10.0) - (-1.0f64).exp() - 0.1).abs() < 1e-15);
        assert!((o_pre(&q, 10.0) - 0.467879).abs() < 1e-6);
        let flat = p(0.7, 0.0, 3.0, 0.2);
        assert_eq!(o_pre(&flat, 0.0), o_pre(&flat, 17.0));
    }

    #[test]
    fn loss_hand_example() {
        // O = [1, 0.5] with amp=0.5, rate=ln 2 on a zero floor.
        let q = p(1.0, std::f64::consts::LN_2, 0.0, 0.0);
        let mut prob = FitProblem::new(vec![0.8, 0.6], 0.5, 10);
        prob.lambda_smooth = 0.0;
        assert!((fit_loss(&q, &prob).0 - 0.05).abs() < 1e-15);
    }

    #[test]
    fn perfect_fit_is_zero() {
        let q = p(0.9, 0.2, 4.0, 0.2);
        let target: Vec<f64> = (0..12).map(|i| o_pre(&q, i as f64)).collect();
        let mut prob = FitProblem::new(target, 0.5, 10);
        prob.lambda_smooth = 3.0;
        let (l, g) = fit_loss(&q, &prob);
        assert_eq!(l, 0.0);
        assert!(g.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn retention_examples() {
        assert!((global_retention(&p(0.5, 0.0, 0.0, 0.0), 32) - 0.5).abs() < 1e-15);
        assert_eq!(global_retention(&p(1.2, 0.01, 32.0, 1.0), 32), 1.0);
        let expect: f64 = (0..32).map(|i| (-0.1 * i as f64).exp()).sum::<f64>() / 32.0;
        assert!((global_retention(&p(1.0, 0.1, 0.0, 0.0), 32) - expect).abs() < 1e-15);
    }

    #[test]
    fn keep_counts_ceil_and_monotone() {
        assert_eq!(keep_counts(&[1.0, 0.51, 0.5, 0.01, 0.0], 10), vec![10, 6, 5, 1, 0]);
        let s = RetentionSchedule::from_ratios("x", vec![0.3, 0.5], 10).unwrap();
        assert_eq!(s.keep_counts, vec![3, 3]);
    }

    #[test]
    fn baselines() {
        let s = baseline_schedule(&BaselineKind::OneShot { layer: 2, ratio: 0.5 }, 4, 8).unwrap();
        assert_eq!(s.ratios, vec![1.0, 1.0, 0.5, 0.5]);
        assert_eq!(s.achieved_retention, 0.75);
        let u = baseline_schedule(&BaselineKind::Uniform { ratio: 0.4 }, 32, 64).unwrap();
        assert!((u.achieved_retention - 0.4).abs() < 1e-15);
        let fs = baseline_schedule(
            &BaselineKind::FixedStage {
                stages: vec![8, 16, 24],
                ratios: vec![1.0, 0.6, 0.3, 0.1],
            },
            32,
            64,
        )
        .unwrap();
        let oracle = (8.0 * 1.0 + 8.0 * 0.6 + 8.0 * 0.3 + 8.0 * 0.1) / 32.0;
        assert!((fs.achieved_retention - oracle).abs() < 1e-15);
        assert!(baseline_schedule(
            &BaselineKind::FixedStage {
                stages: vec![8, 40],
                ratios: vec![1.0, 0.5, 0.2]
            },
            32,
            64
        )
        .is_err());
        let r = baseline_schedule(&BaselineKind::Random { retention: 0.3, seed: 5 }, 32, 64).unwrap();
        assert!((r.achieved_retention - 0.3).abs() < 1e-12);
        assert!(r.ratios.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn retention_matched_baselines() {
        for g in [0.1, 0.2, 0.4] {
            let fs = baseline_schedule(&fixed_stage_for_retention(g, 32, 4).unwrap(), 32, 64).unwrap();
            assert!((fs.achieved_retention - g).abs() < 1e-12);
            let os = baseline_schedule(&one_shot_for_retention(g, 32, 2).unwrap(), 32, 64).unwrap();
            assert!((os.achieved_retention - g).abs() < 1e-12);
        }
    }

    #[test]
    fn recovers_planted_curve() {
        let truth = p(0.9, 0.2, 4.0, 0.2);
        let target: Vec<f64> = (0..32).map(|i| o_pre(&truth, i as f64)).collect();
        let g = global_retention(&truth, 32);
        let s = fit_schedule(&FitProblem::new(target, g, 64)).unwrap();
        assert!(s.loss.unwrap() <= 1e-6, "{s:?}");
        assert!((s.achieved_retention - g).abs() <= 1e-4);
    }

    #[test]
    fn full_retention_target() {
        let target: Vec<f64> = (0..32).map(|i| 1.0 - i as f64 / 31.0).collect();
        let s = fit_schedule(&FitProblem::new(target, 1.0, 64)).unwrap();
        assert!(s.converged);
        assert!(s.keep_counts.iter().all(|&k| k == 64));
    }

    #[test]
    fn infeasible_target_names_bound() {
        let target = vec![0.5; 32];
        let err = fit_schedule(&FitProblem::new(target, 0.001, 64)).unwrap_err();
        match err {
            Error::Infeasible(msg) => assert!(msg.contains("floor lower bound")),
            other => panic!("unexpected {other:?}"),
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn o_pre_strictly_decreasing(
            amp in 0.5f64..1.2, rate in 0.01f64..2.0, center in 0.0f64..32.0, floor in 0.0f64..1.0,
            i in 0.0f64..8.0,
        ) {
            let q = p(amp, rate, center, floor);
            prop_assert!(o_pre(&q, i + 1.0) < o_pre(&q, i));
        }

        #[test]
        fn loss_nonnegative(
            amp in 0.5f64..1.2, rate in 0.01f64..2.0, center in 0.0f64..32.0, floor in 0.0f64..1.0,
            lam in 0.0f64..5.0, seed in 0u64..1000,
        ) {
            let mut rng = Rng::new(seed);
            let target: Vec<f64> = (0..16).map(|_| rng.next_f64()).collect();
            let mut prob = FitProblem::new(target, 0.5, 10);
            prob.lambda_smooth = lam;
            prop_assert!(fit_loss(&p(amp, rate, center, floor), &prob).0 >= 0.0);
        }

        #[test]
        fn keep_counts_never_increase(ratios in proptest::collection::vec(0.0f64..1.0, 1..40), n in 1usize..5000) {
            let k = keep_counts(&ratios, n);
            prop_assert!(k.windows(2).all(|w| w[1] <= w[0]));
            prop_assert!(k.iter().all(|&c| c <= n));
        }
    }
}
