//! Layer-wise spatial-token pruning driven by a retention schedule.
//!
//! On entry to layer `i` the surviving spatial tokens are ranked with that
//! layer's states and cut down to `keep_counts[i]`, so layer `i` and every
//! later layer attend over at most that many spatial tokens. The default
//! ranking is the pre-softmax logit between the head-averaged query of the
//! final instruction token and each head-averaged spatial key.

use serde::{Deserialize, Serialize};

use crate::costmodel::{layer_flops, ModelDims};
use crate::error::{contract, Result};
use crate::numcore::{dot, softmax_rows, Matrix, Rng};
use crate::scheduler::RetentionSchedule;
use crate::tokenstream::TokenStream;
use crate::toydecoder::{Decoder, LayerView, PruneHook, QueryRows};

/// Scores of surviving spatial tokens; `indices` are positions inside the
/// spatial segment and `order` lists them by descending score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankScores {
    pub indices: Vec<usize>,
    pub scores: Vec<f64>,
    pub order: Vec<usize>,
}

impl RankScores {
    /// Orders `indices` by descending score, ties going to the lower index.
    pub fn from_scores(indices: Vec<usize>, scores: Vec<f64>) -> Result<Self> {
        if indices.len() != scores.len() {
            return Err(contract("one score per surviving token required"));
        }
        let mut perm: Vec<usize> = (0..indices.len()).collect();
        perm.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(indices[a].cmp(&indices[b])));
        let order = perm.iter().map(|&p| indices[p]).collect();
        Ok(Self {
            indices,
            scores,
            order,
        })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// `v_j = q_end · key_j` for every row of `keys`, labelled by `indices`.
pub fn rank_tokens(q_end: &[f64], keys: &Matrix, indices: &[usize]) -> Result<RankScores> {
    if keys.rows() != indices.len() {
        return Err(contract("one index per key row required"));
    }
    if keys.rows() > 0 && keys.cols() != q_end.len() {
        return Err(contract(format!(
            "query width {} differs from key width {}",
            q_end.len(),
            keys.cols()
        )));
    }
    let scores = (0..keys.rows()).map(|r| dot(q_end, keys.row(r))).collect();
    RankScores::from_scores(indices.to_vec(), scores)
}

/// Same keys ranked by the softmax attention row of `q_end` over them.
pub fn rank_by_attention(q_end: &[f64], keys: &Matrix, indices: &[usize], scale: f64) -> Result<RankScores> {
    let logits = rank_tokens(q_end, keys, indices)?;
    if logits.is_empty() {
        return Ok(logits);
    }
    let row = Matrix::from_vec(1, logits.len(), logits.scores.iter().map(|v| scale * v).collect())?;
    let weights = softmax_rows(&row, None)?;
    RankScores::from_scores(indices.to_vec(), weights.row(0).to_vec())
}

/// Splits `survivors` into the top `keep` by score and the rest, both sorted
/// by original index.
pub fn prune_step(survivors: &[usize], scores: &RankScores, keep: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    if keep > survivors.len() {
        return Err(contract(format!(
            "cannot keep {keep} of {} survivors",
            survivors.len()
        )));
    }
    let mut sorted_scores = scores.indices.clone();
    sorted_scores.sort_unstable();
    let mut sorted_survivors = survivors.to_vec();
    sorted_survivors.sort_unstable();
    if sorted_scores != sorted_survivors {
        return Err(contract("scores must cover exactly the survivors"));
    }
    let mut kept: Vec<usize> = scores.order[..keep].to_vec();
    let mut dropped: Vec<usize> = scores.order[keep..].to_vec();
    kept.sort_unstable();
    dropped.sort_unstable();
    Ok((kept, dropped))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Strategy {
    /// Query-key logit of the final instruction token.
    Adatoken,
    /// Head-averaged softmax weight from the final instruction token.
    AttentionRow,
    /// Uniformly random ranking.
    Random { seed: u64 },
}

impl Strategy {
    pub fn label(&self) -> &'static str {
        match self {
            Strategy::Adatoken => "adatoken",
            Strategy::AttentionRow => "attention_row",
            Strategy::Random { .. } => "random",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerTrace {
    pub layer: usize,
    pub survivors_before: usize,
    pub dropped: Vec<usize>,
    pub survivors: usize,
    /// Present only on layers where tokens were ranked.
    pub scores: Option<RankScores>,
    pub flops: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneTrace {
    pub strategy: String,
    pub layers: Vec<LayerTrace>,
    pub final_survivors: Vec<usize>,
}

impl PruneTrace {
    pub fn survives(&self, spatial_index: usize) -> bool {
        self.final_survivors.binary_search(&spatial_index).is_ok()
    }
}

struct ScheduleHook<'a> {
    schedule: &'a RetentionSchedule,
    strategy: &'a Strategy,
    rng: Rng,
    dims: ModelDims,
    n_text: usize,
    layers: Vec<LayerTrace>,
}

impl ScheduleHook<'_> {
    fn scores(&mut self, view: &LayerView<'_>, survivors: &[usize]) -> Result<RankScores> {
        let spatial_start = view.stream.spatial_range().start;
        match self.strategy {
            Strategy::Adatoken => {
                let q = view.query_mean(view.stream.last_instruction_index());
                let width = q.len();
                let mut keys = Matrix::zeros(survivors.len(), width);
                for (r, &j) in survivors.iter().enumerate() {
                    keys.row_mut(r).copy_from_slice(&view.key_mean(spatial_start + j));
                }
                rank_tokens(&q, &keys, survivors)
            }
            Strategy::AttentionRow => {
                let row = view.end_attention_to_spatial();
                RankScores::from_scores(survivors.to_vec(), survivors.iter().map(|&j| row[j]).collect())
            }
            Strategy::Random { .. } => {
                let s = survivors.iter().map(|_| self.rng.next_f64()).collect();
                RankScores::from_scores(survivors.to_vec(), s)
            }
        }
    }
}

impl PruneHook for ScheduleHook<'_> {
    fn keep_flags(&mut self, view: &LayerView<'_>) -> Result<Option<Vec<bool>>> {
        let keep = self.schedule.keep_counts[view.layer];
        let survivors: Vec<usize> = (0..view.alive.len()).filter(|&j| view.alive[j]).collect();
        // Layer cost is charged for the tokens that layer actually processes.
        let flops = layer_flops(keep.min(survivors.len()) + self.n_text, &self.dims, true);
        if keep >= survivors.len() {
            if keep > survivors.len() {
                return Err(contract(format!(
                    "schedule keeps {keep} at layer {} but only {} survive",
                    view.layer,
                    survivors.len()
                )));
            }
            self.layers.push(LayerTrace {
                layer: view.layer,
                survivors_before: survivors.len(),
                dropped: Vec::new(),
                survivors: survivors.len(),
                scores: None,
                flops,
            });
            return Ok(None);
        }
        let scores = self.scores(view, &survivors)?;
        let (kept, dropped) = prune_step(&survivors, &scores, keep)?;
        let mut flags = vec![false; view.alive.len()];
        for &j in &kept {
            flags[j] = true;
        }
        self.layers.push(LayerTrace {
            layer: view.layer,
            survivors_before: survivors.len(),
            dropped,
            survivors: kept.len(),
            scores: Some(scores),
            flops,
        });
        Ok(Some(flags))
    }
}

/// Runs the decoder with the schedule's per-layer spatial budgets.
pub fn run_pruned_inference(
    decoder: &Decoder,
    stream: &TokenStream,
    schedule: &RetentionSchedule,
    strategy: &Strategy,
) -> Result<(usize, PruneTrace)> {
    if schedule.n_layers() != decoder.n_layers() {
        return Err(contract(format!(
            "schedule has {} layers, decoder has {}",
            schedule.n_layers(),
            decoder.n_layers()
        )));
    }
    if schedule.n_spatial != stream.n_spatial() {
        return Err(contract(format!(
            "schedule was built for {} spatial tokens, stream has {}",
            schedule.n_spatial,
            stream.n_spatial()
        )));
    }
    let seed = match strategy {
        Strategy::Random { seed } => *seed,
        _ => 0,
    };
    let mut hook = ScheduleHook {
        schedule,
        strategy,
        rng: Rng::new(seed),
        dims: ModelDims::from_decoder(decoder.config()),
        n_text: stream.n_text(),
        layers: Vec::with_capacity(decoder.n_layers()),
    };
    let out = decoder.forward_with_hook(stream, &QueryRows::LastInstruction, &mut hook)?;
    let last = out.mask.layers.last().expect("at least one layer");
    let final_survivors = (0..last.len()).filter(|&j| last[j]).collect();
    Ok((
        out.answer,
        PruneTrace {
            strategy: strategy.label().to_string(),
            layers: hook.layers,
            final_survivors,
        },
    ))
}
