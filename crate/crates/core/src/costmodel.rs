//! Closed-form FLOPs accounting for a decoder prefill pass.
//!
//! Per layer with `n` tokens and width `d`:
//! `8·n·d²` for the Q/K/V/O projections, `4·n²·d` for attention scores and the
//! weighted sum, and `4·n·d²·ffn_mult` for the two feed-forward matrices.
//! Multiply-adds count as two FLOPs. Layer norms and softmax are ignored.

use serde::{Deserialize, Serialize};

use crate::error::{config, contract, Result};
use crate::scheduler::RetentionSchedule;
use crate::toydecoder::DecoderConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDims {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    /// Feed-forward hidden width over `d_model`; 0 for attention-only models.
    pub ffn_mult: f64,
    #[serde(default)]
    pub vocab: Option<usize>,
}

impl ModelDims {
    /// 32-layer 7B-class decoder with `d_model = 4096`.
    pub fn reference() -> Self {
        Self {
            n_layers: 32,
            d_model: 4096,
            n_heads: 32,
            ffn_mult: 2.7,
            vocab: None,
        }
    }

    /// Dimensions of the toy decoder, which has no feed-forward block.
    pub fn from_decoder(cfg: &DecoderConfig) -> Self {
        Self {
            n_layers: cfg.n_layers,
            d_model: cfg.d_model,
            n_heads: cfg.n_heads,
            ffn_mult: 0.0,
            vocab: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.d_model == 0 || self.n_heads == 0 {
            return Err(config("n_layers, d_model and n_heads must be positive"));
        }
        if !(self.ffn_mult.is_finite() && self.ffn_mult >= 0.0) {
            return Err(config(format!("ffn_mult must be finite and >= 0, got {}", self.ffn_mult)));
        }
        if self.vocab == Some(0) {
            return Err(config("vocab must be positive when given"));
        }
        Ok(())
    }
}

/// FLOPs of one layer over `n_tokens`; `with_attention = false` drops the
/// `n²` term.
pub fn layer_flops(n_tokens: usize, dims: &ModelDims, with_attention: bool) -> f64 {
    let n = n_tokens as f64;
    let d = dims.d_model as f64;
    let proj = 8.0 * n * d * d;
    let ffn = 4.0 * n * d * d * dims.ffn_mult;
    let attn = if with_attention { 4.0 * n * n * d } else { 0.0 };
    proj + attn + ffn
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub label: String,
    pub layer_tokens: Vec<usize>,
    pub layer_flops: Vec<f64>,
    pub total_flops: f64,
    pub baseline_flops: f64,
    /// `1 − total / baseline`.
    pub reduction: f64,
    /// Layer-averaged fraction of spatial tokens kept.
    pub utilization: f64,
    /// Present when a throughput was supplied.
    pub seconds: Option<f64>,
}

impl CostReport {
    pub fn ratio(&self) -> f64 {
        self.total_flops / self.baseline_flops
    }
}

/// Workload shared by every schedule in a comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Workload {
    pub dims: ModelDims,
    pub n_spatial: usize,
    pub n_text: usize,
    /// Sustained FLOP/s used to turn totals into seconds.
    #[serde(default)]
    pub throughput: Option<f64>,
}

impl Workload {
    pub fn reference() -> Self {
        Self {
            dims: ModelDims::reference(),
            n_spatial: 3600,
            n_text: 64,
            throughput: None,
        }
    }
}

pub fn schedule_cost(
    schedule: &RetentionSchedule,
    n_spatial: usize,
    n_text: usize,
    dims: &ModelDims,
) -> Result<CostReport> {
    dims.validate()?;
    if schedule.n_layers() != dims.n_layers {
        return Err(contract(format!(
            "schedule has {} layers, model has {}",
            schedule.n_layers(),
            dims.n_layers
        )));
    }
    if schedule.keep_counts.iter().any(|&k| k > n_spatial) {
        return Err(contract(format!("schedule keeps more than {n_spatial} spatial tokens")));
    }
    if n_spatial + n_text == 0 {
        return Err(contract("a layer needs at least one token"));
    }
    let layer_tokens: Vec<usize> = schedule.keep_counts.iter().map(|&k| k + n_text).collect();
    let flops: Vec<f64> = layer_tokens.iter().map(|&n| layer_flops(n, dims, true)).collect();
    let total: f64 = flops.iter().sum();
    let baseline = dims.n_layers as f64 * layer_flops(n_spatial + n_text, dims, true);
    Ok(CostReport {
        label: schedule.label.clone(),
        layer_tokens,
        layer_flops: flops,
        total_flops: total,
        baseline_flops: baseline,
        reduction: 1.0 - total / baseline,
        utilization: schedule.achieved_retention,
        seconds: None,
    })
}

/// One CSV row per schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyRow {
    pub strategy: String,
    pub total_flops: f64,
    pub reduction: f64,
    pub utilization: f64,
    pub seconds: Option<f64>,
}

pub fn compare_strategies(schedules: &[RetentionSchedule], workload: &Workload) -> Result<Vec<StrategyRow>> {
    if let Some(t) = workload.throughput {
        if !(t.is_finite() && t > 0.0) {
            return Err(config(format!("throughput must be positive, got {t}")));
        }
    }
    schedules
        .iter()
        .map(|s| {
            let r = schedule_cost(s, workload.n_spatial, workload.n_text, &workload.dims)?;
            Ok(StrategyRow {
                strategy: r.label,
                total_flops: r.total_flops,
                reduction: r.reduction,
                utilization: r.utilization,
                seconds: workload.throughput.map(|t| r.total_flops / t),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scheduler::{baseline_schedule, BaselineKind};
    use proptest::prelude::*;

    fn small() -> ModelDims {
        ModelDims {
            n_layers: 4,
            d_model: 8,
            n_heads: 2,
            ffn_mult: 2.0,
            vocab: None,
        }
    }

    #[test]
    fn hand_example() {
        let dims = ModelDims {
            n_layers: 1,
            d_model: 2,
            n_heads: 1,
            ffn_mult: 4.0,
            vocab: None,
        };
        assert_eq!(layer_flops(1, &dims, true), 104.0);
        assert_eq!(layer_flops(1, &dims, false), 96.0);
        assert!(layer_flops(20, &dims, true) > 2.0 * layer_flops(10, &dims, true));
        assert_eq!(layer_flops(20, &dims, false), 2.0 * layer_flops(10, &dims, false));
    }

    #[test]
    fn vanilla_has_no_reduction() {
        let s = RetentionSchedule::all_keep(4, 10);
        let r = schedule_cost(&s, 10, 3, &small()).unwrap();
        assert_eq!(r.reduction, 0.0);
        assert_eq!(r.total_flops, r.layer_flops.iter().sum::<f64>());
    }

    #[test]
    fn one_shot_piecewise_sum() {
        let dims = small();
        let s = baseline_schedule(&BaselineKind::OneShot { layer: 2, ratio: 0.5 }, 4, 10).unwrap();
        let r = schedule_cost(&s, 10, 3, &dims).unwrap();
        let full = layer_flops(13, &dims, true);
        let cut = layer_flops(8, &dims, true);
        let expect_total = 2.0 * full + 2.0 * cut;
        assert!((r.total_flops - expect_total).abs() <= 1e-9 * expect_total);
        assert!((r.reduction - (1.0 - expect_total / (4.0 * full))).abs() < 1e-12);
    }

    #[test]
    fn equal_counts_differ_only_in_attention_term() {
        // Same total spatial budget, different distribution.
        let dims = small();
        let a = RetentionSchedule::from_ratios("a", vec![1.0, 0.5, 0.5, 0.0], 10).unwrap();
        let b = RetentionSchedule::from_ratios("b", vec![0.5, 0.5, 0.5, 0.5], 10).unwrap();
        let ra = schedule_cost(&a, 10, 2, &dims).unwrap();
        let rb = schedule_cost(&b, 10, 2, &dims).unwrap();
        let lin = |r: &CostReport| r.layer_tokens.iter().map(|&n| layer_flops(n, &dims, false)).sum::<f64>();
        assert_eq!(lin(&ra), lin(&rb));
        let quad = |r: &CostReport| r.layer_tokens.iter().map(|&n| 4.0 * (n * n) as f64 * 8.0).sum::<f64>();
        let diff = ra.total_flops - rb.total_flops;
        assert!((diff - (quad(&ra) - quad(&rb))).abs() < 1e-9);
    }

    #[test]
    fn compare_rows_and_throughput() {
        let w = Workload {
            dims: small(),
            n_spatial: 10,
            n_text: 2,
            throughput: Some(1e3),
        };
        let rows = compare_strategies(
            &[
                RetentionSchedule::all_keep(4, 10),
                baseline_schedule(&BaselineKind::Uniform { ratio: 0.5 }, 4, 10).unwrap(),
            ],
            &w,
        )
        .unwrap();
        assert_eq!(rows[0].strategy, "vanilla");
        assert_eq!(rows[0].reduction, 0.0);
        assert!(rows[1].reduction > 0.0);
        assert_eq!(rows[1].seconds, Some(rows[1].total_flops / 1e3));
    }

    #[test]
    fn rejects_layer_mismatch() {
        let s = RetentionSchedule::all_keep(3, 10);
        assert!(schedule_cost(&s, 10, 2, &small()).is_err());
    }

    proptest! {
        #[test]
        fn total_monotone_in_each_count(counts in proptest::collection::vec(0usize..9, 4), layer in 0usize..4) {
            let dims = small();
            let mk = |c: Vec<usize>| RetentionSchedule {
                keep_counts: c,
                ..RetentionSchedule::all_keep(4, 10)
            };
            let base = schedule_cost(&mk(counts.clone()), 10, 2, &dims).unwrap();
            let mut more = counts.clone();
            more[layer] += 1;
            let bumped = schedule_cost(&mk(more), 10, 2, &dims).unwrap();
            prop_assert!(bumped.total_flops > base.total_flops);
            let again = schedule_cost(&mk(counts), 10, 2, &dims).unwrap();
            prop_assert_eq!(again, base);
        }
    }
}
