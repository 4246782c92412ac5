//! Independent loop-based oracles shared by the integration tests.
#![allow(dead_code)]

use adatoken::numcore::Rng;
use adatoken::scheduler::{FitProblem, ScheduleParams};
use adatoken::tokenstream::TokenType;
use adatoken::toydecoder::AttentionRecord;

/// Random row-stochastic record with every position as a query row.
pub fn random_record(rng: &mut Rng, layer: usize, n_heads: usize, types: Vec<TokenType>) -> AttentionRecord {
    let n = types.len();
    let mut w = Vec::with_capacity(n_heads * n * n);
    for _ in 0..n_heads * n {
        let raw: Vec<f64> = (0..n).map(|_| rng.next_f64() + 1e-3).collect();
        let s: f64 = raw.iter().sum();
        w.extend(raw.iter().map(|v| v / s));
    }
    AttentionRecord::new(layer, n_heads, (0..n).collect(), types, w).unwrap()
}

/// Random layout with at least one token of each text type and one spatial.
pub fn random_types(rng: &mut Rng) -> Vec<TokenType> {
    let n_sys = 1 + rng.below(4);
    let n_spa = 1 + rng.below(10);
    let n_pr = 1 + rng.below(4);
    let mut t = vec![TokenType::System; n_sys];
    t.extend(vec![TokenType::Spatial; n_spa]);
    t.extend(vec![TokenType::Prompt; n_pr]);
    t
}

fn mass(rec: &AttentionRecord, row_type: Option<TokenType>, key_type: TokenType) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for h in 0..rec.n_heads {
        for (r, &q) in rec.query_rows.iter().enumerate() {
            if let Some(t) = row_type {
                if rec.token_types[q] != t {
                    continue;
                }
            }
            count += 1;
            for k in 0..rec.seq_len {
                if rec.token_types[k] == key_type {
                    total += rec.weights[(h * rec.query_rows.len() + r) * rec.seq_len + k];
                }
            }
        }
    }
    total / count as f64
}

pub fn oracle_s_self(rec: &AttentionRecord) -> f64 {
    mass(rec, None, TokenType::Spatial)
}

/// Spatial-to-system direction for the second term.
pub fn oracle_s_cross(rec: &AttentionRecord, a1: f64, a2: f64) -> f64 {
    a1 * mass(rec, Some(TokenType::Prompt), TokenType::Spatial) + a2 * mass(rec, Some(TokenType::Spatial), TokenType::System)
}

pub fn oracle_inf(s_self: &[f64], s_cross: &[f64], sigma: f64, gamma: f64, eps: f64, alpha: f64) -> Vec<f64> {
    let mut out = Vec::new();
    for i in 0..s_self.len() {
        // Unrolled flow: sum_k sigma * gamma^(i-k) * S_k.
        let mut f = 0.0;
        for k in 0..=i {
            f += sigma * gamma.powi((i - k) as i32) * s_self[k];
        }
        out.push((s_cross[i] / eps).exp() + alpha * f + (1.0 + s_self[i]).ln());
    }
    out
}

pub fn curve(p: &ScheduleParams, n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| p.amp * (-p.rate * (i as f64 - p.center)).exp() + p.floor)
        .collect()
}

pub fn oracle_loss(p: &ScheduleParams, i_norm: &[f64], lambda: f64) -> f64 {
    let o = curve(p, i_norm.len());
    let mut data = 0.0;
    for i in 0..o.len() {
        data += (o[i] - i_norm[i]).powi(2);
    }
    let mut smooth = 0.0;
    for i in 0..o.len() - 1 {
        smooth += ((o[i + 1] - o[i]) - (i_norm[i + 1] - i_norm[i])).powi(2);
    }
    data + lambda * smooth
}

pub fn oracle_retention(p: &ScheduleParams, n: usize) -> f64 {
    curve(p, n).iter().map(|v| v.clamp(0.0, 1.0)).sum::<f64>() / n as f64
}

/// Best constraint-feasible loss over a grid of `steps` points per parameter
/// for amp, rate and center. The floor is the fourth grid axis refined to
/// the exact feasible value by bisection, since the retention is monotone in
/// it and a finite grid almost never hits the equality.
pub fn grid_best(problem: &FitProblem, steps: usize) -> Option<f64> {
    let b = &problem.bounds;
    let n = problem.i_norm.len();
    let g = problem.target_retention;
    let at = |r: [f64; 2], k: usize| r[0] + (r[1] - r[0]) * k as f64 / (steps - 1) as f64;
    let mut best: Option<f64> = None;
    for ia in 0..steps {
        for ib in 0..steps {
            for ic in 0..steps {
                let mut p = ScheduleParams {
                    amp: at(b.amp, ia),
                    rate: at(b.rate, ib),
                    center: at(b.center, ic),
                    floor: b.floor[0],
                };
                let lo = oracle_retention(&p, n);
                p.floor = b.floor[1];
                let hi = oracle_retention(&p, n);
                if lo > g || hi < g {
                    continue;
                }
                let (mut l, mut h) = (b.floor[0], b.floor[1]);
                for _ in 0..100 {
                    let m = 0.5 * (l + h);
                    p.floor = m;
                    if oracle_retention(&p, n) < g {
                        l = m;
                    } else {
                        h = m;
                    }
                }
                p.floor = 0.5 * (l + h);
                let v = oracle_loss(&p, &problem.i_norm, problem.lambda_smooth);
                if best.map_or(true, |bv| v < bv) {
                    best = Some(v);
                }
            }
        }
    }
    best
}

/// Noisy min-max normalized decay curve, resembling measured contributions.
pub fn random_target(rng: &mut Rng, n: usize) -> Vec<f64> {
    let p = ScheduleParams {
        amp: rng.uniform(0.5, 1.2),
        rate: rng.uniform(0.03, 0.4),
        center: rng.uniform(0.0, 8.0),
        floor: rng.uniform(0.0, 0.3),
    };
    let raw: Vec<f64> = curve(&p, n).iter().map(|v| v + 0.05 * rng.normal()).collect();
    let lo = raw.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    raw.iter().map(|v| (v - lo) / (hi - lo)).collect()
}
