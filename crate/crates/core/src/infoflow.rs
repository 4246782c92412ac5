//! Per-layer information-contribution statistics over attention records.
//!
//! "Attention received by a token" is the mean over heads and recorded query
//! rows of the softmax weight landing on it. From that:
//!
//! * `s_self` is the spatial mass per layer,
//! * `s_cross` mixes prompt→spatial and spatial→system interaction mass,
//! * `flow` is a leaky running sum of `s_self` over depth,
//! * `INF(i) = exp(s_cross/ε) + α·F + ln(1 + s_self)`, min-max normalized.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{config, contract, Error, Result};
use crate::tokenstream::TokenType;
use crate::toydecoder::AttentionRecord;

/// Direction of the system/spatial interaction term in `s_cross`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SystemSpatialDirection {
    /// Spatial query rows onto system keys.
    #[default]
    SpatialToSystem,
    /// System query rows onto spatial keys. Always 0 under causal attention
    /// with the standard layout, since system tokens precede spatial ones.
    SystemToSpatial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InfoFlowParams {
    pub sigma: f64,
    pub gamma: f64,
    pub a1: f64,
    pub a2: f64,
    pub epsilon: f64,
    pub alpha: f64,
    /// Replaces `alpha` layer by layer when present.
    pub alpha_per_layer: Option<Vec<f64>>,
    pub system_spatial: SystemSpatialDirection,
}

impl Default for InfoFlowParams {
    fn default() -> Self {
        Self {
            sigma: 0.8,
            gamma: 0.5,
            a1: 0.5,
            a2: 0.5,
            epsilon: 1.0,
            alpha: 1.0,
            alpha_per_layer: None,
            system_spatial: SystemSpatialDirection::SpatialToSystem,
        }
    }
}

impl InfoFlowParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.sigma) {
            return Err(config(format!("sigma must be in [0, 1], got {}", self.sigma)));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(config(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if !(self.a1 >= 0.0 && self.a2 >= 0.0) {
            return Err(config("a1 and a2 must be nonnegative"));
        }
        if !self.gamma.is_finite() || !self.alpha.is_finite() {
            return Err(config("gamma and alpha must be finite"));
        }
        if let Some(a) = &self.alpha_per_layer {
            if a.iter().any(|v| !v.is_finite()) {
                return Err(config("alpha_per_layer entries must be finite"));
            }
        }
        Ok(())
    }

    fn alpha_at(&self, layer: usize) -> f64 {
        self.alpha_per_layer
            .as_ref()
            .and_then(|a| a.get(layer).copied())
            .unwrap_or(self.alpha)
    }
}

/// A value with a diagnostic flag raised on a degenerate input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Flagged<T> {
    pub value: T,
    pub flagged: bool,
}

fn positions_of(record: &AttentionRecord, t: TokenType) -> Vec<usize> {
    (0..record.seq_len).filter(|&p| record.token_types[p] == t).collect()
}

/// Mean over (head, row) pairs of the mass that `rows` (indices into the
/// record's query rows) place on `keys`.
fn mean_mass(record: &AttentionRecord, rows: &[usize], keys: &[usize]) -> f64 {
    let mut acc = 0.0;
    for h in 0..record.n_heads {
        for &r in rows {
            let w = record.row(h, r);
            let mut m = 0.0;
            for &k in keys {
                m += w[k];
            }
            acc += m;
        }
    }
    acc / (record.n_heads * rows.len()) as f64
}

/// Attention mass spatial tokens receive, averaged over heads and query rows.
/// Flagged (value 0) when the record has no spatial positions.
pub fn s_self(record: &AttentionRecord) -> Result<Flagged<f64>> {
    crate::toydecoder::count_query_rows(record)?;
    let spatial = positions_of(record, TokenType::Spatial);
    if spatial.is_empty() {
        return Ok(Flagged {
            value: 0.0,
            flagged: true,
        });
    }
    let rows: Vec<usize> = (0..record.n_query_rows()).collect();
    Ok(Flagged {
        value: mean_mass(record, &rows, &spatial).clamp(0.0, 1.0),
        flagged: false,
    })
}

fn rows_of_type(record: &AttentionRecord, t: TokenType) -> Vec<usize> {
    record
        .query_rows
        .iter()
        .enumerate()
        .filter(|(_, &p)| record.token_types[p] == t)
        .map(|(r, _)| r)
        .collect()
}

/// `a1 · prompt→spatial mass + a2 · system/spatial interaction mass`.
///
/// A term with positive weight needs its query rows in the record; otherwise
/// this fails with [`Error::Unsupported`].
pub fn s_cross(record: &AttentionRecord, params: &InfoFlowParams) -> Result<f64> {
    crate::toydecoder::count_query_rows(record)?;
    let spatial = positions_of(record, TokenType::Spatial);
    let system = positions_of(record, TokenType::System);
    let mut total = 0.0;
    if params.a1 > 0.0 {
        let rows = rows_of_type(record, TokenType::Prompt);
        if rows.is_empty() {
            return Err(Error::Unsupported(format!(
                "layer {}: s_cross needs prompt query rows (record the full map)",
                record.layer
            )));
        }
        total += params.a1 * mean_mass(record, &rows, &spatial);
    }
    if params.a2 > 0.0 {
        let (query_type, keys) = match params.system_spatial {
            SystemSpatialDirection::SpatialToSystem => (TokenType::Spatial, &system),
            SystemSpatialDirection::SystemToSpatial => (TokenType::System, &spatial),
        };
        let rows = rows_of_type(record, query_type);
        if rows.is_empty() {
            return Err(Error::Unsupported(format!(
                "layer {}: s_cross needs {} query rows (record the full map)",
                record.layer,
                query_type.as_str()
            )));
        }
        total += params.a2 * mean_mass(record, &rows, keys);
    }
    Ok(total)
}

/// `F⁰ = σS⁰`, `Fⁱ = σSⁱ + γFⁱ⁻¹`.
pub fn flow_values(s_self: &[f64], params: &InfoFlowParams) -> Vec<f64> {
    let mut out = Vec::with_capacity(s_self.len());
    let mut prev = 0.0;
    for &s in s_self {
        prev = params.sigma * s + params.gamma * prev;
        out.push(prev);
    }
    out
}

pub fn information_contribution(
    s_self: &[f64],
    s_cross: &[f64],
    flow: &[f64],
    params: &InfoFlowParams,
) -> Result<Vec<f64>> {
    if !(params.epsilon > 0.0) {
        return Err(config(format!("epsilon must be > 0, got {}", params.epsilon)));
    }
    if s_self.len() != s_cross.len() || s_self.len() != flow.len() {
        return Err(contract("per-layer statistic lengths differ"));
    }
    Ok((0..s_self.len())
        .map(|i| {
            (s_cross[i] / params.epsilon).exp()
                + params.alpha_at(i) * flow[i]
                + s_self[i].ln_1p()
        })
        .collect())
}

/// `(x − min) / (max − min)`; a constant input maps to all 0.5 and is flagged.
pub fn normalize_minmax(values: &[f64]) -> Result<Flagged<Vec<f64>>> {
    if values.len() < 2 {
        return Err(contract("min-max normalization needs at least two values"));
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return Ok(Flagged {
            value: vec![0.5; values.len()],
            flagged: true,
        });
    }
    let span = hi - lo;
    Ok(Flagged {
        value: values.iter().map(|v| ((v - lo) / span).clamp(0.0, 1.0)).collect(),
        flagged: false,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerInfoStats {
    pub layer: usize,
    pub s_self: f64,
    pub s_cross: f64,
    pub f_flow: f64,
    pub inf: f64,
    pub i_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InfoFlowReport {
    pub layers: Vec<LayerInfoStats>,
    /// INF was constant over layers, so `i_norm` is all 0.5.
    pub constant_inf: bool,
    /// Some layer had no spatial positions.
    pub no_spatial: bool,
}

impl InfoFlowReport {
    pub fn i_norm(&self) -> Vec<f64> {
        self.layers.iter().map(|l| l.i_norm).collect()
    }
}

fn linear_stats(records: &[AttentionRecord], params: &InfoFlowParams) -> Result<Vec<(f64, f64, bool)>> {
    records
        .par_iter()
        .map(|rec| {
            let s = s_self(rec)?;
            Ok((s.value, s_cross(rec, params)?, s.flagged))
        })
        .collect()
}

fn finish(s: Vec<f64>, c: Vec<f64>, no_spatial: bool, params: &InfoFlowParams) -> Result<InfoFlowReport> {
    let flow = flow_values(&s, params);
    let inf = information_contribution(&s, &c, &flow, params)?;
    let norm = normalize_minmax(&inf)?;
    let layers = (0..s.len())
        .map(|i| LayerInfoStats {
            layer: i,
            s_self: s[i],
            s_cross: c[i],
            f_flow: flow[i],
            inf: inf[i],
            i_norm: norm.value[i],
        })
        .collect();
    Ok(InfoFlowReport {
        layers,
        constant_inf: norm.flagged,
        no_spatial,
    })
}

/// Full statistics for one forward pass (one record per layer, in order).
pub fn analyze(records: &[AttentionRecord], params: &InfoFlowParams) -> Result<InfoFlowReport> {
    params.validate()?;
    check_layer_order(records)?;
    let lin = linear_stats(records, params)?;
    let no_spatial = lin.iter().any(|l| l.2);
    finish(
        lin.iter().map(|l| l.0).collect(),
        lin.iter().map(|l| l.1).collect(),
        no_spatial,
        params,
    )
}

/// Statistics over several scenes: `s_self` and `s_cross` are averaged across
/// scenes per layer before the recursive and nonlinear steps.
pub fn analyze_many(scenes: &[Vec<AttentionRecord>], params: &InfoFlowParams) -> Result<InfoFlowReport> {
    params.validate()?;
    let first = scenes.first().ok_or_else(|| contract("no scenes to analyze"))?;
    let n_layers = first.len();
    let mut s = vec![0.0; n_layers];
    let mut c = vec![0.0; n_layers];
    let mut no_spatial = false;
    for records in scenes {
        if records.len() != n_layers {
            return Err(contract("scenes disagree on layer count"));
        }
        check_layer_order(records)?;
        for (i, (ls, lc, flag)) in linear_stats(records, params)?.into_iter().enumerate() {
            s[i] += ls;
            c[i] += lc;
            no_spatial |= flag;
        }
    }
    let k = scenes.len() as f64;
    s.iter_mut().for_each(|v| *v /= k);
    c.iter_mut().for_each(|v| *v /= k);
    finish(s, c, no_spatial, params)
}

fn check_layer_order(records: &[AttentionRecord]) -> Result<()> {
    if records.iter().enumerate().any(|(i, r)| r.layer != i) {
        return Err(contract("records must cover layers 0..n in order"));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRedundancy {
    pub layer: usize,
    pub n_spatial: usize,
    pub n_low: usize,
    pub low_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RedundancyReport {
    pub threshold: f64,
    pub layers: Vec<LayerRedundancy>,
    /// Low-contribution (token, layer) pairs over all spatial (token, layer) pairs.
    pub cumulative_low_fraction: f64,
}

/// Per layer, the fraction of spatial tokens whose share of the total
/// spatial mass falls below `threshold`.
pub fn redundancy_report(records: &[AttentionRecord], threshold: f64) -> Result<RedundancyReport> {
    if records.is_empty() {
        return Err(contract("redundancy report needs at least one layer"));
    }
    let mut layers = Vec::with_capacity(records.len());
    let (mut low_total, mut all_total) = (0usize, 0usize);
    for rec in records {
        crate::toydecoder::count_query_rows(rec)?;
        let spatial = positions_of(rec, TokenType::Spatial);
        let received = rec.received();
        let total: f64 = spatial.iter().map(|&p| received[p]).sum();
        let n_low = spatial
            .iter()
            .filter(|&&p| {
                let share = if total > 0.0 { received[p] / total } else { 0.0 };
                share < threshold
            })
            .count();
        let n = spatial.len();
        low_total += n_low;
        all_total += n;
        layers.push(LayerRedundancy {
            layer: rec.layer,
            n_spatial: n,
            n_low,
            low_fraction: if n > 0 { n_low as f64 / n as f64 } else { 0.0 },
        });
    }
    Ok(RedundancyReport {
        threshold,
        layers,
        cumulative_low_fraction: if all_total > 0 {
            low_total as f64 / all_total as f64
        } else {
            0.0
        },
    })
}
