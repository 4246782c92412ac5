//! Typed token sequences and the planted-retrieval scene builder.
//!
//! A stream is laid out as `[system | spatial | prompt]`, with answer tokens
//! appended during decoding. Spatial tokens stand in for fused multi-view patch
//! features: each carries a content part (key code, value code, patch texture)
//! plus a small sinusoidal code of its `(view, x, y)` location.
//!
//! Embedding layout for `d_model = d`, `half = d / 2`:
//!
//! | dims                         | content                                  |
//! |------------------------------|------------------------------------------|
//! | `0..key_vocab`               | key code, `KEY_GAIN · e_key`             |
//! | `key_vocab..half-1`          | patch texture / text position code       |
//! | `half-1`                     | text marker (1 for non-spatial tokens)   |
//! | `half..half+value_vocab`     | value code, `VALUE_GAIN · e_value`       |
//! | `half+value_vocab..d`        | unused                                   |
//!
//! The spatial positional code spans all dims with norm
//! `POSITION_FRACTION ×` the content norm.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{config, contract, Result};
use crate::numcore::{Matrix, Rng};

pub const KEY_GAIN: f64 = 3.0;
pub const VALUE_GAIN: f64 = 3.0;
pub const TEXTURE_NORM: f64 = 0.5;
pub const POSITION_FRACTION: f64 = 0.08;
pub const TEXT_POSITION_NORM: f64 = 0.3;
pub const MARKER: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenType {
    System,
    Spatial,
    Prompt,
    Answer,
}

impl TokenType {
    pub fn as_str(self) -> &'static str {
        match self {
            TokenType::System => "system",
            TokenType::Spatial => "spatial",
            TokenType::Prompt => "prompt",
            TokenType::Answer => "answer",
        }
    }
}

/// Contiguous run of one token type, `start..end`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub token_type: TokenType,
    pub start: usize,
    pub end: usize,
}

impl Segment {
    pub fn range(&self) -> Range<usize> {
        self.start..self.end
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }
}

/// Scene geometry and vocabulary sizes for the planted retrieval task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub n_views: usize,
    pub patch_w: usize,
    pub patch_h: usize,
    pub channels: usize,
    pub d_model: usize,
    pub n_relevant: usize,
    pub key_vocab: usize,
    pub value_vocab: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            n_views: 4,
            patch_w: 4,
            patch_h: 4,
            channels: 3,
            d_model: 64,
            n_relevant: 1,
            key_vocab: 8,
            value_vocab: 8,
        }
    }
}

impl SceneSpec {
    pub fn n_spatial(&self) -> usize {
        self.n_views * self.patch_w * self.patch_h
    }

    pub fn half(&self) -> usize {
        self.d_model / 2
    }

    pub fn marker_dim(&self) -> usize {
        self.half() - 1
    }

    pub fn value_dim(&self, value_id: usize) -> usize {
        self.half() + value_id
    }

    fn texture_dims(&self) -> Range<usize> {
        self.key_vocab..self.marker_dim()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_spatial() == 0 {
            return Err(config("scene has no spatial tokens (n_views·patch_w·patch_h = 0)"));
        }
        if self.d_model < 4 || self.d_model % 2 != 0 {
            return Err(config(format!("d_model must be even and ≥ 4, got {}", self.d_model)));
        }
        if self.channels == 0 {
            return Err(config("channels must be ≥ 1"));
        }
        if self.n_relevant == 0 || self.n_relevant > self.n_spatial() {
            return Err(config(format!(
                "n_relevant must be in 1..={}, got {}",
                self.n_spatial(),
                self.n_relevant
            )));
        }
        let distractors = self.n_spatial() > self.n_relevant;
        let min_vocab = if distractors { 2 } else { 1 };
        if self.key_vocab < min_vocab || self.value_vocab < min_vocab {
            return Err(config(format!(
                "key_vocab and value_vocab must be ≥ {min_vocab} for this scene"
            )));
        }
        if self.key_vocab > self.half() - 1 {
            return Err(config(format!(
                "key_vocab {} exceeds key subspace capacity {}",
                self.key_vocab,
                self.half() - 1
            )));
        }
        if self.value_vocab > self.half() {
            return Err(config(format!(
                "value_vocab {} exceeds value subspace capacity {}",
                self.value_vocab,
                self.half()
            )));
        }
        Ok(())
    }
}

/// Ground truth for one scene. `carrier_indices` are positions inside the
/// spatial segment (0-based, sorted).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlantedTask {
    pub query_key_id: usize,
    pub carrier_indices: Vec<usize>,
    pub target_value_id: usize,
}

impl PlantedTask {
    pub fn sample(spec: &SceneSpec, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let query_key_id = rng.below(spec.key_vocab);
        let target_value_id = rng.below(spec.value_vocab);
        let mut carrier_indices = rng.sample_distinct(spec.n_spatial(), spec.n_relevant);
        carrier_indices.sort_unstable();
        Ok(Self {
            query_key_id,
            carrier_indices,
            target_value_id,
        })
    }

    pub fn validate(&self, spec: &SceneSpec) -> Result<()> {
        if self.query_key_id >= spec.key_vocab {
            return Err(config("query_key_id outside key vocabulary"));
        }
        if self.target_value_id >= spec.value_vocab {
            return Err(config("target_value_id outside value vocabulary"));
        }
        if self.carrier_indices.is_empty()
            || self.carrier_indices.iter().any(|&c| c >= spec.n_spatial())
        {
            return Err(config("carrier indices must be nonempty and inside the spatial segment"));
        }
        Ok(())
    }

    pub fn is_carrier(&self, spatial_index: usize) -> bool {
        self.carrier_indices.binary_search(&spatial_index).is_ok()
    }
}

/// `KEY_GAIN · e_key` in the key subspace; the code the final prompt token carries.
pub fn key_code(spec: &SceneSpec, key_id: usize) -> Vec<f64> {
    let mut code = vec![0.0; spec.d_model];
    code[key_id] = KEY_GAIN;
    code
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn rescale(v: &mut [f64], target: f64) {
    let n = norm(v);
    if n > 0.0 {
        let f = target / n;
        v.iter_mut().for_each(|x| *x *= f);
    }
}

/// Sinusoidal code of a spatial location spread over all `d` dims.
fn spatial_position_code(d: usize, view: usize, x: usize, y: usize) -> Vec<f64> {
    let coords = [view as f64, x as f64, y as f64];
    (0..d)
        .map(|k| {
            let band = k / 3;
            let freq = 1.0 / 100f64.powf(band as f64 * 3.0 / d as f64);
            let arg = (coords[k % 3] + 1.0) * freq;
            if band % 2 == 0 {
                arg.sin()
            } else {
                arg.cos()
            }
        })
        .collect()
}

/// 1-D sinusoidal code for text token `position` over `dims`.
fn text_position_code(d: usize, dims: Range<usize>, position: usize) -> Vec<f64> {
    let mut code = vec![0.0; d];
    let width = dims.len();
    for (m, k) in dims.enumerate() {
        let freq = 1.0 / 100f64.powf((m / 2) as f64 * 2.0 / width.max(1) as f64);
        let arg = (position as f64 + 1.0) * freq;
        code[k] = if m % 2 == 0 { arg.sin() } else { arg.cos() };
    }
    rescale(&mut code, TEXT_POSITION_NORM);
    code
}

/// Builds the `n_spatial × d_model` spatial block.
///
/// Carriers encode `(query_key_id, target_value_id)`. Distractors draw a key id
/// different from the query key and a value id different from the target, so
/// losing every carrier always changes the retrieved value.
pub fn build_spatial_tokens(spec: &SceneSpec, task: &PlantedTask, rng: &mut Rng) -> Result<Matrix> {
    spec.validate()?;
    task.validate(spec)?;
    let d = spec.d_model;
    let texture = spec.texture_dims();
    let mut out = Matrix::zeros(spec.n_spatial(), d);
    let mut idx = 0;
    for view in 0..spec.n_views {
        for x in 0..spec.patch_w {
            for y in 0..spec.patch_h {
                let (key, value) = if task.is_carrier(idx) {
                    (task.query_key_id, task.target_value_id)
                } else {
                    let mut key = rng.below(spec.key_vocab - 1);
                    if key >= task.query_key_id {
                        key += 1;
                    }
                    let mut value = rng.below(spec.value_vocab - 1);
                    if value >= task.target_value_id {
                        value += 1;
                    }
                    (key, value)
                };
                let row = out.row_mut(idx);
                row[key] = KEY_GAIN;
                row[spec.value_dim(value)] = VALUE_GAIN;

                // Patch texture: `channels` features projected onto a cosine basis.
                let features: Vec<f64> = (0..spec.channels).map(|_| rng.normal()).collect();
                let mut tex = vec![0.0; texture.len()];
                for (m, t) in tex.iter_mut().enumerate() {
                    *t = features
                        .iter()
                        .enumerate()
                        .map(|(ch, f)| {
                            f * (std::f64::consts::PI * (m as f64 + 0.5) * (ch as f64 + 1.0)
                                / texture.len() as f64)
                                .cos()
                        })
                        .sum();
                }
                rescale(&mut tex, TEXTURE_NORM);
                for (k, t) in texture.clone().zip(&tex) {
                    row[k] = *t;
                }

                let content_norm = norm(row);
                let mut pos = spatial_position_code(d, view, x, y);
                rescale(&mut pos, POSITION_FRACTION * content_norm);
                for (r, p) in row.iter_mut().zip(&pos) {
                    *r += p;
                }
                idx += 1;
            }
        }
    }
    Ok(out)
}

/// Embedding of a non-spatial token at stream `position`.
fn text_embedding(spec: &SceneSpec, position: usize) -> Vec<f64> {
    let mut row = text_position_code(spec.d_model, spec.texture_dims(), position);
    row[spec.marker_dim()] = MARKER;
    row
}

/// Embedding for a generated answer token carrying `value_id`.
pub fn answer_embedding(spec: &SceneSpec, value_id: usize, position: usize) -> Vec<f64> {
    let mut row = text_embedding(spec, position);
    if value_id < spec.value_vocab {
        row[spec.value_dim(value_id)] = VALUE_GAIN;
    }
    row
}

/// A typed sequence of token embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenStream {
    embeddings: Matrix,
    types: Vec<TokenType>,
    segments: Vec<Segment>,
    last_instruction_index: usize,
}

impl TokenStream {
    /// Assembles a stream from its parts, checking the layout invariants.
    pub fn from_parts(embeddings: Matrix, types: Vec<TokenType>) -> Result<Self> {
        if embeddings.rows() != types.len() {
            return Err(contract("one token type per embedding row required"));
        }
        let mut segments: Vec<Segment> = Vec::new();
        for (i, &t) in types.iter().enumerate() {
            match segments.last_mut() {
                Some(seg) if seg.token_type == t => seg.end = i + 1,
                _ => segments.push(Segment {
                    token_type: t,
                    start: i,
                    end: i + 1,
                }),
            }
        }
        let order: Vec<TokenType> = segments.iter().map(|s| s.token_type).collect();
        let valid = matches!(
            order.as_slice(),
            [TokenType::System, TokenType::Spatial, TokenType::Prompt]
                | [TokenType::System, TokenType::Spatial, TokenType::Prompt, TokenType::Answer]
        );
        if !valid {
            return Err(contract(format!(
                "segments must be system, spatial, prompt[, answer]; got {order:?}"
            )));
        }
        let last_instruction_index = segments[2].end - 1;
        Ok(Self {
            embeddings,
            types,
            segments,
            last_instruction_index,
        })
    }

    pub fn len(&self) -> usize {
        self.types.len()
    }

    pub fn is_empty(&self) -> bool {
        self.types.is_empty()
    }

    pub fn embeddings(&self) -> &Matrix {
        &self.embeddings
    }

    pub fn types(&self) -> &[TokenType] {
        &self.types
    }

    pub fn type_of(&self, position: usize) -> TokenType {
        self.types[position]
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn last_instruction_index(&self) -> usize {
        self.last_instruction_index
    }

    pub fn spatial_range(&self) -> Range<usize> {
        self.segments[1].range()
    }

    pub fn n_spatial(&self) -> usize {
        self.segments[1].len()
    }

    /// Number of system + prompt + answer tokens.
    pub fn n_text(&self) -> usize {
        self.len() - self.n_spatial()
    }

    pub fn append_answer(&mut self, embedding: &[f64]) -> Result<()> {
        if embedding.len() != self.embeddings.cols() {
            return Err(contract("answer embedding width mismatch"));
        }
        let row = Matrix::from_vec(1, embedding.len(), embedding.to_vec())?;
        self.embeddings.append_rows(&row)?;
        self.types.push(TokenType::Answer);
        let pos = self.types.len() - 1;
        match self.segments.last_mut() {
            Some(seg) if seg.token_type == TokenType::Answer => seg.end = pos + 1,
            _ => self.segments.push(Segment {
                token_type: TokenType::Answer,
                start: pos,
                end: pos + 1,
            }),
        }
        Ok(())
    }
}

/// `[system | spatial | prompt]` stream for `task`. The final prompt token
/// carries the query key code.
pub fn assemble_stream(
    spec: &SceneSpec,
    task: &PlantedTask,
    n_system: usize,
    n_prompt: usize,
    rng: &mut Rng,
) -> Result<TokenStream> {
    if n_system == 0 || n_prompt == 0 {
        return Err(config("n_system and n_prompt must both be ≥ 1"));
    }
    let spatial = build_spatial_tokens(spec, task, rng)?;
    let n = n_system + spec.n_spatial() + n_prompt;
    let d = spec.d_model;
    let mut emb = Matrix::zeros(n, d);
    let mut types = Vec::with_capacity(n);
    for p in 0..n_system {
        emb.row_mut(p).copy_from_slice(&text_embedding(spec, p));
        types.push(TokenType::System);
    }
    for s in 0..spec.n_spatial() {
        emb.row_mut(n_system + s).copy_from_slice(spatial.row(s));
        types.push(TokenType::Spatial);
    }
    let prompt_start = n_system + spec.n_spatial();
    for p in prompt_start..n {
        emb.row_mut(p).copy_from_slice(&text_embedding(spec, p));
        types.push(TokenType::Prompt);
    }
    let end = emb.row_mut(n - 1);
    for (e, c) in end.iter_mut().zip(key_code(spec, task.query_key_id)) {
        *e += c;
    }
    TokenStream::from_parts(emb, types)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(n_views: usize, w: usize, h: usize) -> SceneSpec {
        SceneSpec {
            n_views,
            patch_w: w,
            patch_h: h,
            ..SceneSpec::default()
        }
    }

    #[test]
    fn single_token_scene_encodes_the_pair() {
        let spec = SceneSpec {
            n_relevant: 1,
            ..spec(1, 1, 1)
        };
        let mut rng = Rng::new(1);
        let task = PlantedTask::sample(&spec, &mut rng).unwrap();
        let m = build_spatial_tokens(&spec, &task, &mut rng).unwrap();
        assert_eq!(m.rows(), 1);
        let row = m.row(0);
        let key = (0..spec.key_vocab)
            .max_by(|&a, &b| row[a].total_cmp(&row[b]))
            .unwrap();
        let value = (0..spec.value_vocab)
            .max_by(|&a, &b| row[spec.value_dim(a)].total_cmp(&row[spec.value_dim(b)]))
            .unwrap();
        assert_eq!((key, value), (task.query_key_id, task.target_value_id));
    }

    #[test]
    fn spatial_row_count() {
        let spec = spec(2, 3, 3);
        let mut rng = Rng::new(2);
        let task = PlantedTask::sample(&spec, &mut rng).unwrap();
        assert_eq!(build_spatial_tokens(&spec, &task, &mut rng).unwrap().rows(), 18);
    }

    #[test]
    fn carrier_key_margin() {
        let spec = spec(4, 4, 4);
        let mut rng = Rng::new(77);
        let task = PlantedTask::sample(&spec, &mut rng).unwrap();
        let m = build_spatial_tokens(&spec, &task, &mut rng).unwrap();
        let code = key_code(&spec, task.query_key_id);
        let key_ip = |r: usize| -> f64 { (0..spec.half()).map(|k| m.get(r, k) * code[k]).sum() };
        let carrier = task.carrier_indices[0];
        let best_distractor = (0..spec.n_spatial())
            .filter(|&r| r != carrier)
            .map(key_ip)
            .fold(f64::NEG_INFINITY, f64::max);
        assert!(key_ip(carrier) - best_distractor >= 2.0);
    }

    #[test]
    fn positional_code_is_small() {
        let spec = SceneSpec::default();
        let mut rng = Rng::new(5);
        let task = PlantedTask::sample(&spec, &mut rng).unwrap();
        let m = build_spatial_tokens(&spec, &task, &mut rng).unwrap();
        let content = (KEY_GAIN.powi(2) + VALUE_GAIN.powi(2) + TEXTURE_NORM.powi(2)).sqrt();
        // Row norm is bounded by content + positional parts.
        for r in 0..m.rows() {
            let n = norm(m.row(r));
            assert!(n <= content * (1.0 + 0.1) + 1e-12);
        }
    }

    #[test]
    fn layout_arithmetic() {
        let spec = spec(1, 2, 2);
        let mut rng = Rng::new(3);
        let task = PlantedTask::sample(&spec, &mut rng).unwrap();
        let s = assemble_stream(&spec, &task, 1, 2, &mut rng).unwrap();
        use TokenType::*;
        assert_eq!(s.types(), &[System, Spatial, Spatial, Spatial, Spatial, Prompt, Prompt]);
        assert_eq!(s.last_instruction_index(), 6);
        assert_eq!(s.spatial_range(), 1..5);
    }

    #[test]
    fn segments_partition_on_random_specs() {
        let mut rng = Rng::new(100);
        for _ in 0..100 {
            let spec = SceneSpec {
                n_views: 1 + rng.below(4),
                patch_w: 1 + rng.below(4),
                patch_h: 1 + rng.below(4),
                ..SceneSpec::default()
            };
            let n_system = 1 + rng.below(5);
            let n_prompt = 1 + rng.below(5);
            let task = PlantedTask::sample(&spec, &mut rng).unwrap();
            let s = assemble_stream(&spec, &task, n_system, n_prompt, &mut rng).unwrap();
            let mut next = 0;
            for seg in s.segments() {
                assert_eq!(seg.start, next);
                assert!(seg.range().all(|p| s.type_of(p) == seg.token_type));
                next = seg.end;
            }
            assert_eq!(next, s.len());
            assert_eq!(s.n_spatial(), spec.n_spatial());
            assert_eq!(s.type_of(s.last_instruction_index()), TokenType::Prompt);
        }
    }

    #[test]
    fn zero_spatial_rejected() {
        let spec = spec(0, 4, 4);
        assert!(matches!(spec.validate(), Err(crate::Error::Config(_))));
        let mut rng = Rng::new(0);
        assert!(PlantedTask::sample(&spec, &mut rng).is_err());
    }

    #[test]
    fn vocab_capacity_enforced() {
        let spec = SceneSpec {
            d_model: 16,
            key_vocab: 8,
            ..SceneSpec::default()
        };
        assert!(matches!(spec.validate(), Err(crate::Error::Config(_))));
    }

    #[test]
    fn same_seed_same_embeddings() {
        let spec = SceneSpec::default();
        let build = || {
            let mut rng = Rng::new(9);
            let task = PlantedTask::sample(&spec, &mut rng).unwrap();
            assemble_stream(&spec, &task, 16, 32, &mut rng).unwrap()
        };
        let (a, b) = (build(), build());
        let bits = |s: &TokenStream| -> Vec<u64> {
            s.embeddings().data().iter().map(|v| v.to_bits()).collect()
        };
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn answer_tokens_extend_stream() {
        let spec = SceneSpec::default();
        let mut rng = Rng::new(4);
        let task = PlantedTask::sample(&spec, &mut rng).unwrap();
        let mut s = assemble_stream(&spec, &task, 2, 3, &mut rng).unwrap();
        let li = s.last_instruction_index();
        s.append_answer(&answer_embedding(&spec, 1, s.len())).unwrap();
        s.append_answer(&answer_embedding(&spec, 2, s.len())).unwrap();
        assert_eq!(s.segments().len(), 4);
        assert_eq!(s.segments()[3].len(), 2);
        assert_eq!(s.last_instruction_index(), li);
    }
}
