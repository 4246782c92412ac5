//! Forward-only causal decoder with analytically constructed weights.
//!
//! Every layer is `h ← h + Attn(h)` with no MLP. Head 0 of every layer is a
//! *relevance head*: its query/key maps read the key-code dims, so the final
//! prompt token scores spatial tokens by key match, and a marker feature pushes
//! text keys far below spatial ones. The remaining heads have small random
//! query/key maps plus an attention-sink feature whose strength grows with
//! depth, which makes spatial attention decay through the stack.
//!
//! Value/output maps are small random mixings everywhere except head 0 of the
//! retrieval layer, which copies the value code of the attended tokens into the
//! residual stream. The answer is the argmax of the value dims at the final
//! prompt token after the last layer.

use serde::{Deserialize, Serialize};

use crate::error::{config, contract, Result};
use crate::numcore::{dot, Matrix, Rng};
use crate::tokenstream::{answer_embedding, SceneSpec, TokenStream, TokenType, KEY_GAIN};

/// Std of the random query/key entries of non-relevance heads.
const RANDOM_QK_STD: f64 = 0.05;
/// Relative size of the residual update in near-identity layers.
const MIX_GAIN: f64 = 0.02;
/// Text-key logit bonus reached by the sink feature at the last layer.
const SINK_MAX: f64 = 2.5;
const COPY_GAIN: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    /// 1-based index of the layer whose relevance head copies values.
    pub retrieval_layer: usize,
    /// Multiplier on every attention logit.
    pub scale: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            n_layers: 32,
            n_heads: 4,
            d_model: 64,
            retrieval_layer: 2,
            scale: 2.0,
        }
    }
}

impl DecoderConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self, spec: &SceneSpec) -> Result<()> {
        spec.validate()?;
        if self.n_layers == 0 || self.n_heads == 0 {
            return Err(config("decoder needs at least one layer and one head"));
        }
        if self.retrieval_layer == 0 || self.retrieval_layer > self.n_layers {
            return Err(config(format!(
                "retrieval_layer must be in 1..={}, got {}",
                self.n_layers, self.retrieval_layer
            )));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(config("d_model must be divisible by n_heads"));
        }
        if self.d_model != spec.d_model {
            return Err(config(format!(
                "decoder d_model {} differs from scene d_model {}",
                self.d_model, spec.d_model
            )));
        }
        if !(self.scale.is_finite() && self.scale >= 0.0) {
            return Err(config("scale must be finite and nonnegative"));
        }
        let dh = self.head_dim();
        if spec.key_vocab + 1 > dh || spec.value_vocab > dh {
            return Err(config(format!(
                "head dim {dh} too small for key_vocab {} (+1 marker) / value_vocab {}",
                spec.key_vocab, spec.value_vocab
            )));
        }
        Ok(())
    }
}

/// Which query rows an [`AttentionRecord`] keeps.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum QueryRows {
    /// Only the final instruction token.
    #[default]
    LastInstruction,
    /// Every position.
    All,
    /// Explicit positions, ascending.
    Positions(Vec<usize>),
}

impl QueryRows {
    fn resolve(&self, stream: &TokenStream) -> Result<Vec<usize>> {
        match self {
            QueryRows::LastInstruction => Ok(vec![stream.last_instruction_index()]),
            QueryRows::All => Ok((0..stream.len()).collect()),
            QueryRows::Positions(p) => {
                if p.is_empty() || p.iter().any(|&i| i >= stream.len()) {
                    return Err(contract("query row positions must be nonempty and in range"));
                }
                if p.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(contract("query row positions must be strictly ascending"));
                }
                Ok(p.clone())
            }
        }
    }
}

/// Attention weights of one layer restricted to designated query rows.
///
/// `weights` is laid out head-major, then query row, then key position.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    pub layer: usize,
    pub n_heads: usize,
    pub seq_len: usize,
    pub query_rows: Vec<usize>,
    pub token_types: Vec<TokenType>,
    pub weights: Vec<f64>,
}

impl AttentionRecord {
    pub fn new(
        layer: usize,
        n_heads: usize,
        query_rows: Vec<usize>,
        token_types: Vec<TokenType>,
        weights: Vec<f64>,
    ) -> Result<Self> {
        let seq_len = token_types.len();
        if weights.len() != n_heads * query_rows.len() * seq_len {
            return Err(contract(format!(
                "attention record length {} != {n_heads}·{}·{seq_len}",
                weights.len(),
                query_rows.len()
            )));
        }
        if query_rows.iter().any(|&r| r >= seq_len) {
            return Err(contract("query row index outside the sequence"));
        }
        Ok(Self {
            layer,
            n_heads,
            seq_len,
            query_rows,
            token_types,
            weights,
        })
    }

    pub fn n_query_rows(&self) -> usize {
        self.query_rows.len()
    }

    /// Key weights of query row `r` (an index into `query_rows`) for `head`.
    pub fn row(&self, head: usize, r: usize) -> &[f64] {
        let start = (head * self.query_rows.len() + r) * self.seq_len;
        &self.weights[start..start + self.seq_len]
    }

    /// Mean over heads and query rows of the weight each key position receives.
    pub fn received(&self) -> Vec<f64> {
        let mut acc = vec![0.0; self.seq_len];
        for h in 0..self.n_heads {
            for r in 0..self.n_query_rows() {
                for (a, w) in acc.iter_mut().zip(self.row(h, r)) {
                    *a += w;
                }
            }
        }
        let denom = (self.n_heads * self.n_query_rows()).max(1) as f64;
        acc.iter_mut().for_each(|a| *a /= denom);
        acc
    }
}

/// Number of query rows a record analyzes; empty records are an error.
pub fn count_query_rows(record: &AttentionRecord) -> Result<usize> {
    match record.n_query_rows() {
        0 => Err(contract("attention record has no query rows")),
        n => Ok(n),
    }
}

/// Per-layer keep flags over spatial tokens (indexed within the spatial segment).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PruneMask {
    pub layers: Vec<Vec<bool>>,
}

impl PruneMask {
    pub fn all_keep(n_layers: usize, n_spatial: usize) -> Self {
        Self {
            layers: vec![vec![true; n_spatial]; n_layers],
        }
    }

    /// Mask that drops `spatial_indices` from `layer` onward.
    pub fn drop_from(n_layers: usize, n_spatial: usize, layer: usize, spatial_indices: &[usize]) -> Self {
        let mut mask = Self::all_keep(n_layers, n_spatial);
        for flags in mask.layers.iter_mut().skip(layer) {
            for &j in spatial_indices {
                flags[j] = false;
            }
        }
        mask
    }

    pub fn validate(&self, n_layers: usize, n_spatial: usize) -> Result<()> {
        if self.layers.len() != n_layers {
            return Err(contract(format!(
                "prune mask has {} layers, decoder has {n_layers}",
                self.layers.len()
            )));
        }
        if self.layers.iter().any(|l| l.len() != n_spatial) {
            return Err(contract("prune mask width differs from the spatial segment"));
        }
        for (i, w) in self.layers.windows(2).enumerate() {
            if w[1].iter().zip(&w[0]).any(|(&now, &before)| now && !before) {
                return Err(contract(format!("prune mask revives a token at layer {}", i + 1)));
            }
        }
        Ok(())
    }

    pub fn survivors(&self, layer: usize) -> usize {
        self.layers[layer].iter().filter(|&&k| k).count()
    }
}

struct Head {
    wq: Matrix,
    wk: Matrix,
    wv: Matrix,
}

struct Layer {
    heads: Vec<Head>,
    /// `(n_heads·head_dim) × d_model`.
    wo: Matrix,
}

/// The analytic decoder. Weights are immutable after [`build_decoder`].
pub struct Decoder {
    config: DecoderConfig,
    spec: SceneSpec,
    layers: Vec<Layer>,
}

fn random_matrix(rows: usize, cols: usize, std: f64, rng: &mut Rng) -> Matrix {
    let mut m = Matrix::zeros(rows, cols);
    for r in 0..rows {
        for v in m.row_mut(r) {
            *v = std * rng.normal();
        }
    }
    m
}

pub fn build_decoder(config: &DecoderConfig, spec: &SceneSpec, rng: &mut Rng) -> Result<Decoder> {
    config.validate(spec)?;
    let d = config.d_model;
    let dh = config.head_dim();
    let h = config.n_heads;
    let marker = spec.marker_dim();
    let marker_gain = std::f64::consts::SQRT_2 * KEY_GAIN;
    let retrieval = config.retrieval_layer - 1;

    let mut layers = Vec::with_capacity(config.n_layers);
    for l in 0..config.n_layers {
        let depth = if config.n_layers > 1 {
            l as f64 / (config.n_layers - 1) as f64
        } else {
            0.0
        };
        let mut heads = Vec::with_capacity(h);
        for head in 0..h {
            let (wq, wk) = if head == 0 {
                let mut wq = Matrix::zeros(d, dh);
                let mut wk = Matrix::zeros(d, dh);
                for r in 0..spec.key_vocab {
                    wq.set(r, r, 1.0);
                    wk.set(r, r, 1.0);
                }
                wq.set(marker, dh - 1, marker_gain);
                wk.set(marker, dh - 1, -marker_gain);
                (wq, wk)
            } else {
                let mut wq = random_matrix(d, dh, RANDOM_QK_STD, rng);
                let mut wk = random_matrix(d, dh, RANDOM_QK_STD, rng);
                for r in 0..d {
                    wq.set(r, dh - 1, 0.0);
                    wk.set(r, dh - 1, 0.0);
                }
                wq.set(marker, dh - 1, 1.0);
                wk.set(marker, dh - 1, SINK_MAX * depth);
                (wq, wk)
            };
            let wv = if head == 0 && l == retrieval {
                let mut wv = Matrix::zeros(d, dh);
                for v in 0..spec.value_vocab {
                    wv.set(spec.value_dim(v), v, 1.0);
                }
                wv
            } else {
                random_matrix(d, dh, (1.0 / d as f64).sqrt(), rng)
            };
            heads.push(Head { wq, wk, wv });
        }
        let mut wo = random_matrix(h * dh, d, MIX_GAIN / ((h * dh) as f64).sqrt(), rng);
        if l == retrieval {
            for r in 0..dh {
                wo.row_mut(r).fill(0.0);
            }
            for v in 0..spec.value_vocab {
                wo.set(v, spec.value_dim(v), COPY_GAIN);
            }
        }
        layers.push(Layer { heads, wo });
    }
    Ok(Decoder {
        config: config.clone(),
        spec: spec.clone(),
        layers,
    })
}

/// Per-head query and key states of one layer, handed to a [`PruneHook`]
/// before the layer attends.
pub struct LayerView<'a> {
    pub layer: usize,
    pub stream: &'a TokenStream,
    /// Per head, `seq_len × head_dim`.
    pub queries: &'a [Matrix],
    /// Per head, `seq_len × head_dim`.
    pub keys: &'a [Matrix],
    /// Spatial keep flags currently in force.
    pub alive: &'a [bool],
    pub scale: f64,
}

impl LayerView<'_> {
    /// Query state of `position` averaged over heads.
    pub fn query_mean(&self, position: usize) -> Vec<f64> {
        mean_rows(self.queries, position)
    }

    /// Key state of `position` averaged over heads.
    pub fn key_mean(&self, position: usize) -> Vec<f64> {
        mean_rows(self.keys, position)
    }

    /// Head-averaged softmax weights from the final instruction token onto each
    /// spatial token (0 for dropped ones), with the current keep flags applied.
    pub fn end_attention_to_spatial(&self) -> Vec<f64> {
        let end = self.stream.last_instruction_index();
        let spatial = self.stream.spatial_range();
        let n_heads = self.queries.len();
        let visible: Vec<bool> = (0..=end)
            .map(|j| !spatial.contains(&j) || self.alive[j - spatial.start])
            .collect();
        let mut acc = vec![0.0; spatial.len()];
        let mut logits = vec![0.0; end + 1];
        let mut weights = vec![0.0; end + 1];
        for h in 0..n_heads {
            let q = self.queries[h].row(end);
            for (j, l) in logits.iter_mut().enumerate() {
                *l = self.scale * dot(q, self.keys[h].row(j));
            }
            crate::numcore::softmax_row_into(&logits, Some(&visible), &mut weights)
                .expect("final instruction token always sees itself");
            for (a, w) in acc.iter_mut().zip(&weights[spatial.clone()]) {
                *a += w / n_heads as f64;
            }
        }
        acc
    }
}

fn mean_rows(per_head: &[Matrix], position: usize) -> Vec<f64> {
    let width = per_head[0].cols();
    let mut acc = vec![0.0; width];
    for m in per_head {
        for (a, v) in acc.iter_mut().zip(m.row(position)) {
            *a += v;
        }
    }
    acc.iter_mut().for_each(|a| *a /= per_head.len() as f64);
    acc
}

/// Decides the spatial keep flags of each layer during a forward pass.
pub trait PruneHook {
    /// Keep flags for `view.layer`, or `None` to keep the current ones. Flags
    /// may only switch tokens off.
    fn keep_flags(&mut self, view: &LayerView<'_>) -> Result<Option<Vec<bool>>>;
}

struct FixedMask<'a>(&'a PruneMask);

impl PruneHook for FixedMask<'_> {
    fn keep_flags(&mut self, view: &LayerView<'_>) -> Result<Option<Vec<bool>>> {
        Ok(Some(self.0.layers[view.layer].clone()))
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Argmax of the value readout at the readout position.
    pub answer: usize,
    /// Value-dim readout at the readout position.
    pub readout: Vec<f64>,
    pub records: Vec<AttentionRecord>,
    /// Spatial keep flags actually used per layer.
    pub mask: PruneMask,
}

impl Decoder {
    pub fn config(&self) -> &DecoderConfig {
        &self.config
    }

    pub fn spec(&self) -> &SceneSpec {
        &self.spec
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// Runs all layers; the answer is read at the final instruction token.
    pub fn forward(
        &self,
        stream: &TokenStream,
        mask: Option<&PruneMask>,
        rows: &QueryRows,
    ) -> Result<ForwardOutput> {
        match mask {
            Some(m) => {
                m.validate(self.n_layers(), stream.n_spatial())?;
                self.forward_with_hook(stream, rows, &mut FixedMask(m))
            }
            None => self.forward_with_hook(stream, rows, &mut NoPrune),
        }
    }

    /// Forward pass where `hook` chooses the keep flags at each layer from that
    /// layer's query/key states.
    pub fn forward_with_hook(
        &self,
        stream: &TokenStream,
        rows: &QueryRows,
        hook: &mut dyn PruneHook,
    ) -> Result<ForwardOutput> {
        self.run(stream, rows, hook, stream.last_instruction_index())
    }

    fn run(
        &self,
        stream: &TokenStream,
        rows: &QueryRows,
        hook: &mut dyn PruneHook,
        readout_at: usize,
    ) -> Result<ForwardOutput> {
        let d = self.config.d_model;
        if stream.embeddings().cols() != d {
            return Err(contract("stream width differs from decoder d_model"));
        }
        let n = stream.len();
        let dh = self.config.head_dim();
        let n_heads = self.config.n_heads;
        let spatial = stream.spatial_range();
        let query_rows = rows.resolve(stream)?;
        let mut recorded = vec![usize::MAX; n];
        for (r, &pos) in query_rows.iter().enumerate() {
            recorded[pos] = r;
        }

        let mut hidden = stream.embeddings().clone();
        let mut alive = vec![true; spatial.len()];
        let mut used = Vec::with_capacity(self.n_layers());
        let mut records = Vec::with_capacity(self.n_layers());
        let mut logits = vec![0.0; n];
        let mut weights = vec![0.0; n];
        let mut visible = vec![true; n];

        for (l, layer) in self.layers.iter().enumerate() {
            let mut queries = Vec::with_capacity(n_heads);
            let mut keys = Vec::with_capacity(n_heads);
            let mut values = Vec::with_capacity(n_heads);
            for head in &layer.heads {
                queries.push(hidden.matmul(&head.wq)?);
                keys.push(hidden.matmul(&head.wk)?);
                values.push(hidden.matmul(&head.wv)?);
            }
            let view = LayerView {
                layer: l,
                stream,
                queries: &queries,
                keys: &keys,
                alive: &alive,
                scale: self.config.scale,
            };
            if let Some(flags) = hook.keep_flags(&view)? {
                if flags.len() != alive.len() {
                    return Err(contract("keep flags width differs from the spatial segment"));
                }
                if flags.iter().zip(&alive).any(|(&now, &before)| now && !before) {
                    return Err(contract(format!("keep flags revive a token at layer {l}")));
                }
                alive = flags;
            }
            for (j, v) in visible.iter_mut().enumerate() {
                *v = !spatial.contains(&j) || alive[j - spatial.start];
            }

            let mut record = vec![0.0; n_heads * query_rows.len() * n];
            let mut concat = Matrix::zeros(n, n_heads * dh);
            for i in 0..n {
                let is_rec = recorded[i] != usize::MAX;
                // Dropped spatial tokens never serve as keys again; skip their rows
                // unless someone asked to see them.
                if !visible[i] && !is_rec {
                    continue;
                }
                for h in 0..n_heads {
                    let q = queries[h].row(i);
                    let k = &keys[h];
                    for j in 0..=i {
                        logits[j] = self.config.scale * dot(q, k.row(j));
                    }
                    let vis = &visible[..=i];
                    if crate::numcore::softmax_row_into(
                        &logits[..=i],
                        Some(vis),
                        &mut weights[..=i],
                    )
                    .is_err()
                    {
                        return Err(contract(format!("query row {i} sees no key at layer {l}")));
                    }
                    let out = &mut concat.row_mut(i)[h * dh..(h + 1) * dh];
                    let v = &values[h];
                    for j in 0..=i {
                        let w = weights[j];
                        if w != 0.0 {
                            for (o, x) in out.iter_mut().zip(v.row(j)) {
                                *o += w * x;
                            }
                        }
                    }
                    if is_rec {
                        let start = (h * query_rows.len() + recorded[i]) * n;
                        record[start..start + i + 1].copy_from_slice(&weights[..=i]);
                    }
                }
            }
            let update = concat.matmul(&layer.wo)?;
            for i in 0..n {
                if !visible[i] && recorded[i] == usize::MAX {
                    continue;
                }
                for (hv, u) in hidden.row_mut(i).iter_mut().zip(update.row(i)) {
                    *hv += u;
                }
            }
            records.push(AttentionRecord {
                layer: l,
                n_heads,
                seq_len: n,
                query_rows: query_rows.clone(),
                token_types: stream.types().to_vec(),
                weights: record,
            });
            used.push(alive.clone());
        }

        let readout: Vec<f64> = (0..self.spec.value_vocab)
            .map(|v| hidden.get(readout_at, self.spec.value_dim(v)))
            .collect();
        let answer = argmax(&readout);
        Ok(ForwardOutput {
            answer,
            readout,
            records,
            mask: PruneMask { layers: used },
        })
    }

    /// Greedy decode of `n_answer` tokens. Each new token is read out at the
    /// current last position and appended as an answer token. Returns the
    /// generated values and the final pass's records, whose query rows are the
    /// final instruction token plus every answer token. Pruning applies to the
    /// spatial segment only.
    pub fn generate(
        &self,
        stream: &TokenStream,
        n_answer: usize,
        mask: Option<&PruneMask>,
    ) -> Result<(Vec<usize>, Vec<AttentionRecord>)> {
        if let Some(m) = mask {
            m.validate(self.n_layers(), stream.n_spatial())?;
        }
        let mut cur = stream.clone();
        let mut answers = Vec::with_capacity(n_answer);
        for _ in 0..n_answer {
            let at = cur.len() - 1;
            let out = match mask {
                Some(m) => self.run(&cur, &QueryRows::LastInstruction, &mut FixedMask(m), at)?,
                None => self.run(&cur, &QueryRows::LastInstruction, &mut NoPrune, at)?,
            };
            answers.push(out.answer);
            let emb = answer_embedding(&self.spec, out.answer, cur.len());
            cur.append_answer(&emb)?;
        }
        let mut rows = vec![cur.last_instruction_index()];
        rows.extend(cur.last_instruction_index() + 1..cur.len());
        let rows = QueryRows::Positions(rows);
        let out = match mask {
            Some(m) => self.run(&cur, &rows, &mut FixedMask(m), cur.last_instruction_index())?,
            None => self.run(&cur, &rows, &mut NoPrune, cur.last_instruction_index())?,
        };
        Ok((answers, out.records))
    }
}

struct NoPrune;

impl PruneHook for NoPrune {
    fn keep_flags(&mut self, _view: &LayerView<'_>) -> Result<Option<Vec<bool>>> {
        Ok(None)
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}
