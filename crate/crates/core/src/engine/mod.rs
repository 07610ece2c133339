//! Exact desk-scale transformer attention: QKV projection, head-wise causal
//! attention over a KV cache, chunked prefill, and single-token decode.
//!
//! The numeric path carries attention only; MLP and norm blocks hold no KV
//! state and are accounted analytically elsewhere. Weights and token
//! embeddings are synthesized from a seed, so runs are reproducible
//! bit-for-bit in single-threaded execution.

mod cache;
mod matrix;

pub use cache::HeadKvCache;
pub use matrix::Matrix;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::workload::ModelSpec;

/// Softmax with max-subtraction, in place.
pub(crate) fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Per-layer projection weights.
#[derive(Debug, Clone)]
pub struct LayerWeights {
    /// `D x D`
    pub w_q: Matrix,
    /// `D x D_kv`
    pub w_k: Matrix,
    /// `D x D_kv`
    pub w_v: Matrix,
}

/// A seeded synthetic model: projection weights plus a position-indexed
/// embedding stream.
#[derive(Debug, Clone)]
pub struct EngineModel {
    pub num_layers: usize,
    pub num_q_heads: usize,
    pub num_kv_heads: usize,
    pub head_dim: usize,
    layers: Vec<LayerWeights>,
    seed: u64,
}

impl EngineModel {
    pub fn new(m: &ModelSpec, seed: u64) -> Self {
        let d = (m.num_q_heads * m.head_dim) as usize;
        let d_kv = (m.num_kv_heads * m.head_dim) as usize;
        let scale = 1.0 / (d as f32).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sample = |rows: usize, cols: usize| {
            Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0f32) * scale)
        };
        let layers = (0..m.num_layers)
            .map(|_| LayerWeights {
                w_q: sample(d, d),
                w_k: sample(d, d_kv),
                w_v: sample(d, d_kv),
            })
            .collect();
        EngineModel {
            num_layers: m.num_layers as usize,
            num_q_heads: m.num_q_heads as usize,
            num_kv_heads: m.num_kv_heads as usize,
            head_dim: m.head_dim as usize,
            layers,
            seed,
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.num_q_heads * self.head_dim
    }

    pub fn kv_dim(&self) -> usize {
        self.num_kv_heads * self.head_dim
    }

    pub fn gqa_ratio(&self) -> usize {
        self.num_q_heads / self.num_kv_heads
    }

    pub fn layer(&self, l: usize) -> &LayerWeights {
        &self.layers[l]
    }

    /// Synthetic embedding for one absolute position. Random-access so decode
    /// can continue any prefix.
    pub fn embedding(&self, position: u64) -> Vec<f32> {
        let mix = self
            .seed
            .wrapping_add((position + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut rng = ChaCha8Rng::seed_from_u64(mix);
        (0..self.hidden_dim())
            .map(|_| rng.random_range(-1.0..1.0f32))
            .collect()
    }

    /// Embeddings for positions `[start, start+len)` as a `len x D` matrix.
    pub fn embed_chunk(&self, start: u64, len: usize) -> Matrix {
        let mut data = Vec::with_capacity(len * self.hidden_dim());
        for pos in 0..len {
            data.extend_from_slice(&self.embedding(start + pos as u64));
        }
        Matrix::from_vec(len, self.hidden_dim(), data).expect("consistent embedding width")
    }

    /// Fresh cache sized for `capacity` tokens.
    pub fn new_cache(&self, capacity: usize) -> HeadKvCache {
        HeadKvCache::new(self.num_layers, self.num_kv_heads, self.head_dim, capacity)
    }
}

/// Exact projections: `Q = x W_Q`, `K = x W_K`, `V = x W_V`.
pub fn project_qkv(weights: &LayerWeights, x: &Matrix) -> Result<(Matrix, Matrix, Matrix)> {
    let q = x.matmul(&weights.w_q)?;
    let k = x.matmul(&weights.w_k)?;
    let v = x.matmul(&weights.w_v)?;
    Ok((q, k, v))
}

/// Causal softmax attention for a single head.
///
/// `q` is `s_q x D_h`; `k`/`v` are flat row-major blocks of `kv_len` rows of
/// width `D_h` (including this chunk's rows). Query row `i` attends to cache
/// positions `<= causal_offset + i`.
pub fn attention_head_rows(
    q: &Matrix,
    k: &[f32],
    v: &[f32],
    kv_len: usize,
    causal_offset: usize,
    out: &mut Matrix,
    out_col: usize,
) -> Result<()> {
    let dh = q.cols();
    if k.len() != kv_len * dh || v.len() != kv_len * dh {
        return Err(Error::ShapeMismatch(format!(
            "kv block of {} values does not hold {kv_len} rows of width {dh}",
            k.len()
        )));
    }
    if causal_offset + q.rows() > kv_len {
        return Err(Error::ShapeMismatch(format!(
            "query rows {} at offset {causal_offset} exceed cached length {kv_len}",
            q.rows()
        )));
    }
    let scale = 1.0 / (dh as f32).sqrt();
    let mut scores = vec![0.0f32; kv_len];
    for i in 0..q.rows() {
        let visible = causal_offset + i + 1;
        let q_row = q.row(i);
        for (j, score) in scores[..visible].iter_mut().enumerate() {
            let k_row = &k[j * dh..(j + 1) * dh];
            let mut dot = 0.0;
            for (a, b) in q_row.iter().zip(k_row) {
                dot += a * b;
            }
            *score = dot * scale;
        }
        softmax_in_place(&mut scores[..visible]);
        let out_row = out.row_mut(i);
        out_row[out_col..out_col + dh].fill(0.0);
        for (j, &p) in scores[..visible].iter().enumerate() {
            let v_row = &v[j * dh..(j + 1) * dh];
            for (o, &val) in out_row[out_col..out_col + dh].iter_mut().zip(v_row) {
                *o += p * val;
            }
        }
    }
    Ok(())
}

/// Matrix-shaped wrapper over [`attention_head_rows`].
pub fn attention_head(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    causal_offset: usize,
) -> Result<Matrix> {
    if k.cols() != q.cols() || v.cols() != q.cols() || k.rows() != v.rows() {
        return Err(Error::ShapeMismatch(format!(
            "attention_head shapes q {}x{}, k {}x{}, v {}x{}",
            q.rows(),
            q.cols(),
            k.rows(),
            k.cols(),
            v.rows(),
            v.cols()
        )));
    }
    let mut out = Matrix::zeros(q.rows(), q.cols());
    attention_head_rows(q, k.data(), v.data(), k.rows(), causal_offset, &mut out, 0)?;
    Ok(out)
}

/// Key/value blocks for a set of KV heads, addressed by global head index.
pub trait KvSource {
    /// `(k, v, len)` for one KV head; slices hold `len` rows of head width.
    fn head(&self, kv_head: usize) -> (&[f32], &[f32], usize);
}

/// One layer of a [`HeadKvCache`] viewed as a `KvSource`.
pub struct CacheLayerView<'a> {
    cache: &'a HeadKvCache,
    layer: usize,
}

impl HeadKvCache {
    pub fn layer_view(&self, layer: usize) -> CacheLayerView<'_> {
        CacheLayerView { cache: self, layer }
    }
}

impl KvSource for CacheLayerView<'_> {
    fn head(&self, kv_head: usize) -> (&[f32], &[f32], usize) {
        self.cache.head(self.layer, kv_head)
    }
}

/// Attention for the query heads mapped to KV heads `[kv_head_range)`,
/// writing each head's output into its column band of `out`.
pub fn attention_heads_into(
    model: &EngineModel,
    q: &Matrix,
    src: &dyn KvSource,
    kv_heads: std::ops::Range<usize>,
    causal_offset: usize,
    out: &mut Matrix,
) -> Result<()> {
    let dh = model.head_dim;
    let ratio = model.gqa_ratio();
    for kv_head in kv_heads {
        let (k, v, len) = src.head(kv_head);
        for sub in 0..ratio {
            let q_head = kv_head * ratio + sub;
            let q_band = q.column_band(q_head * dh, dh);
            attention_head_rows(&q_band, k, v, len, causal_offset, out, q_head * dh)?;
        }
    }
    Ok(())
}

/// Full-layer attention: every head computed independently and concatenated
/// in query-head order. Query head `q` reads KV head `q / (H / H_kv)`.
pub fn full_attention_layer(
    model: &EngineModel,
    q: &Matrix,
    src: &dyn KvSource,
    causal_offset: usize,
) -> Result<Matrix> {
    if q.cols() != model.hidden_dim() {
        return Err(Error::ShapeMismatch(format!(
            "query width {} does not match hidden dim {}",
            q.cols(),
            model.hidden_dim()
        )));
    }
    let mut out = Matrix::zeros(q.rows(), model.hidden_dim());
    attention_heads_into(model, q, src, 0..model.num_kv_heads, causal_offset, &mut out)?;
    Ok(out)
}

/// Split a `rows x D_kv` projection into per-KV-head row blocks.
pub fn split_heads(model: &EngineModel, m: &Matrix) -> Vec<Vec<f32>> {
    let dh = model.head_dim;
    (0..model.num_kv_heads)
        .map(|h| {
            let mut block = Vec::with_capacity(m.rows() * dh);
            for r in 0..m.rows() {
                block.extend_from_slice(&m.row(r)[h * dh..(h + 1) * dh]);
            }
            block
        })
        .collect()
}

/// Run one chunk of positions through one layer against `cache`, appending
/// the chunk's K/V first so queries see themselves. Returns the layer output.
pub fn layer_forward(
    model: &EngineModel,
    cache: &mut HeadKvCache,
    layer: usize,
    x: &Matrix,
) -> Result<Matrix> {
    let (q, k, v) = project_qkv(model.layer(layer), x)?;
    let causal_offset = cache.len(layer, 0);
    let k_heads = split_heads(model, &k);
    let v_heads = split_heads(model, &v);
    for h in 0..model.num_kv_heads {
        cache.append(layer, h, &k_heads[h], &v_heads[h])?;
    }
    full_attention_layer(model, &q, &cache.layer_view(layer), causal_offset)
}

/// Chunked prefill over `context` synthetic positions. Returns the final
/// position's hidden state; `cache` ends with `context` tokens on every head.
pub fn prefill(
    model: &EngineModel,
    cache: &mut HeadKvCache,
    context: usize,
    chunk: usize,
) -> Result<Vec<f32>> {
    if context == 0 {
        return Ok(vec![0.0; model.hidden_dim()]);
    }
    let chunk = chunk.max(1).min(context);
    let mut summary = vec![0.0; model.hidden_dim()];
    let mut done = 0;
    while done < context {
        let len = chunk.min(context - done);
        let mut x = model.embed_chunk(done as u64, len);
        for layer in 0..model.num_layers {
            x = layer_forward(model, cache, layer, &x)?;
        }
        done += len;
        if done == context {
            summary = x.row(len - 1).to_vec();
        }
    }
    Ok(summary)
}

/// Append one token and return its hidden state after the final layer.
pub fn decode_step(model: &EngineModel, cache: &mut HeadKvCache, x_t: &Matrix) -> Result<Vec<f32>> {
    if cache.is_empty() {
        return Err(Error::InvalidState(
            "decode requires a prefilled cache".into(),
        ));
    }
    if x_t.rows() != 1 || x_t.cols() != model.hidden_dim() {
        return Err(Error::ShapeMismatch(format!(
            "decode input must be 1x{}, got {}x{}",
            model.hidden_dim(),
            x_t.rows(),
            x_t.cols()
        )));
    }
    let mut x = x_t.clone();
    for layer in 0..model.num_layers {
        x = layer_forward(model, cache, layer, &x)?;
    }
    Ok(x.row(0).to_vec())
}

/// Decode the synthetic token at absolute `position`.
pub fn decode_position(
    model: &EngineModel,
    cache: &mut HeadKvCache,
    position: u64,
) -> Result<Vec<f32>> {
    let x = Matrix::from_vec(1, model.hidden_dim(), model.embedding(position))?;
    decode_step(model, cache, &x)
}
