//! Query masking and the mask-conditioned reconstructor.

use candle_core::{DType, Device, Tensor, D};
use rand::seq::index::sample_weighted;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::data::{EmbeddingTable, TokenizedQuery, MASK_ID};
use crate::error::{Error, Result};
use crate::model::nn::{
    causal_bias, positional_table, softmax_last, AttnMask, DecoderLayer, EncoderLayer, LayerNorm,
    Linear, ParamStore,
};

/// Weight of a content word relative to a function word when choosing
/// positions to mask.
const CONTENT_WEIGHT: f64 = 3.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Forward,
    Inverse,
}

/// A query with some valid positions replaced by the mask token.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedQuery {
    pub ids: Vec<u32>,
    pub target_ids: Vec<u32>,
    /// Sorted ascending.
    pub masked_positions: Vec<usize>,
    pub valid_len: usize,
    pub direction: Direction,
}

/// `ceil(valid_len / 3)`.
pub fn masked_count(valid_len: usize) -> usize {
    valid_len.div_ceil(3)
}

fn mask_tokens<R: Rng + ?Sized>(q: &TokenizedQuery, direction: Direction, rng: &mut R) -> Result<MaskedQuery> {
    if q.valid_len == 0 {
        return Err(Error::InvalidArgument("cannot mask an empty query".into()));
    }
    let weight = |i: usize| if q.content_flags[i] { CONTENT_WEIGHT } else { 1.0 };
    let picked = sample_weighted(rng, q.valid_len, weight, masked_count(q.valid_len))
        .map_err(|e| Error::InvalidArgument(format!("masking weights: {e}")))?;
    let mut masked_positions = picked.into_vec();
    masked_positions.sort_unstable();
    let mut ids = q.ids.clone();
    for &p in &masked_positions {
        ids[p] = MASK_ID;
    }
    Ok(MaskedQuery {
        ids,
        target_ids: q.ids.clone(),
        masked_positions,
        valid_len: q.valid_len,
        direction,
    })
}

pub fn mask_query<R: Rng + ?Sized>(q: &TokenizedQuery, rng: &mut R) -> Result<MaskedQuery> {
    mask_tokens(q, Direction::Forward, rng)
}

/// Reverses the query, then masks it independently of the forward stream.
pub fn mask_inverse_query<R: Rng + ?Sized>(q: &TokenizedQuery, rng: &mut R) -> Result<MaskedQuery> {
    mask_tokens(&reverse_query(q), Direction::Inverse, rng)
}

/// Reverses the valid tokens; padding stays at the tail.
pub fn reverse_query(q: &TokenizedQuery) -> TokenizedQuery {
    let mut out = q.clone();
    let n = q.valid_len;
    out.ids[..n].reverse();
    out.content_flags[..n].reverse();
    for (dst, src) in (0..n).zip((0..n).rev()) {
        out.embeddings[dst * q.d_w..(dst + 1) * q.d_w].copy_from_slice(q.embedding(src));
    }
    out
}

/// Tensors for a batch of masked queries.
#[derive(Clone, Debug)]
pub struct MaskedQueryBatch {
    /// `[B, n_q, d_w]` word embeddings with masked positions zeroed.
    pub embeddings: Tensor,
    /// `[B, n_q, 1]`, 1 at masked positions.
    pub is_mask: Tensor,
    /// `[B, n_q]` u32 target ids.
    pub targets: Tensor,
    /// `[B, n_q]`, 1 at valid positions.
    pub valid: Tensor,
}

impl MaskedQueryBatch {
    pub fn new(queries: &[&MaskedQuery], table: &EmbeddingTable, dtype: DType, device: &Device) -> Result<Self> {
        let b = queries.len();
        let n_q = queries.first().map(|q| q.ids.len()).unwrap_or(0);
        let d_w = table.dim();
        let mut emb = Vec::with_capacity(b * n_q * d_w);
        let mut is_mask = Vec::with_capacity(b * n_q);
        let mut targets = Vec::with_capacity(b * n_q);
        let mut valid = Vec::with_capacity(b * n_q);
        for q in queries {
            if q.ids.len() != n_q {
                return Err(Error::Shape("masked queries of different lengths".into()));
            }
            for (p, (&id, &t)) in q.ids.iter().zip(&q.target_ids).enumerate() {
                if t as usize >= table.len() {
                    return Err(Error::Shape(format!("token id {t} outside the embedding table")));
                }
                let masked = id == MASK_ID;
                if masked {
                    emb.extend(std::iter::repeat(0.0f32).take(d_w));
                } else {
                    emb.extend_from_slice(table.row(id));
                }
                is_mask.push(if masked { 1.0f32 } else { 0.0 });
                targets.push(t);
                valid.push(if p < q.valid_len { 1.0f32 } else { 0.0 });
            }
        }
        Ok(Self {
            embeddings: Tensor::from_vec(emb, (b, n_q, d_w), device)?.to_dtype(dtype)?,
            is_mask: Tensor::from_vec(is_mask, (b, n_q, 1), device)?.to_dtype(dtype)?,
            targets: Tensor::from_vec(targets, (b, n_q), device)?,
            valid: Tensor::from_vec(valid, (b, n_q), device)?.to_dtype(dtype)?,
        })
    }

    pub fn len(&self) -> usize {
        self.valid.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cat(parts: &[&MaskedQueryBatch]) -> Result<Self> {
        let pick = |f: fn(&MaskedQueryBatch) -> &Tensor| -> Result<Tensor> {
            let ts: Vec<&Tensor> = parts.iter().map(|p| f(p)).collect();
            Ok(Tensor::cat(&ts, 0)?)
        };
        Ok(Self {
            embeddings: pick(|p| &p.embeddings)?,
            is_mask: pick(|p| &p.is_mask)?,
            targets: pick(|p| &p.targets)?,
            valid: pick(|p| &p.valid)?,
        })
    }
}

/// Mask-conditioned video encoder and causal query decoder, shared by both
/// query directions.
pub struct Reconstructor {
    store: ParamStore,
    word_in: Linear,
    mask_row: Tensor,
    start_row: Tensor,
    query_pos: Tensor,
    video_in: Linear,
    video_pos: Tensor,
    encoder: Vec<EncoderLayer>,
    enc_norm: LayerNorm,
    decoder: Vec<DecoderLayer>,
    dec_norm: LayerNorm,
    out: Linear,
    causal: Tensor,
}

impl Reconstructor {
    pub fn new(cfg: &TrainConfig, dtype: DType, device: &Device) -> Result<Self> {
        let d = cfg.d_h;
        let mut store = ParamStore::new(cfg.seed ^ 0x7265_636f_6e73_7400, dtype, device);
        let mut s = store.root("reconstructor");
        let bound = 1.0 / (cfg.d_w as f64).sqrt();
        let mask_row = s.uniform("mask_row", &[cfg.d_w], bound)?;
        let start_row = s.uniform("start_row", &[cfg.d_w], bound)?;
        let word_in = Linear::new(s.pp("word_in"), cfg.d_w, d, true)?;
        let query_pos = positional_table(s.pp("query_pos"), cfg.n_q, d)?;
        let video_in = Linear::new(s.pp("video_in"), cfg.d_v, d, true)?;
        let video_pos = positional_table(s.pp("video_pos"), cfg.n_v, d)?;
        let encoder = (0..cfg.layers)
            .map(|i| EncoderLayer::new(s.pp(&format!("encoder.{i}")), d, cfg.heads))
            .collect::<Result<_>>()?;
        let enc_norm = LayerNorm::new(s.pp("enc_norm"), d)?;
        let decoder = (0..cfg.layers)
            .map(|i| DecoderLayer::new(s.pp(&format!("decoder.{i}")), d, cfg.heads))
            .collect::<Result<_>>()?;
        let dec_norm = LayerNorm::new(s.pp("dec_norm"), d)?;
        let out = Linear::new(s.pp("out"), d, cfg.vocab_size, true)?;
        Ok(Self {
            store,
            word_in,
            mask_row,
            start_row,
            query_pos,
            video_in,
            video_pos,
            encoder,
            enc_norm,
            decoder,
            dec_norm,
            out,
            causal: causal_bias(cfg.n_q, dtype, device)?,
        })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// Encodes `[B, n_v, d_v]` video under `[B, n_v]` clip weights.
    pub fn masked_encode(&self, video: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let (b, n_v, _) = video.dims3()?;
        if mask.dims() != [b, n_v] {
            return Err(Error::Shape(format!(
                "mask of shape {:?} for video batch [{b}, {n_v}, _]",
                mask.dims()
            )));
        }
        let weights = mask.reshape((b, 1, 1, n_v))?;
        let attn = AttnMask {
            bias: None,
            key_weights: Some(&weights),
        };
        let mut h = self.video_in.forward(video)?.broadcast_add(&self.video_pos)?;
        for layer in &self.encoder {
            h = layer.forward(&h, attn)?;
        }
        self.enc_norm.forward(&h)
    }

    /// Hidden state per query position, `[B, n_q, d]`. Position `i` sees the
    /// masked words before it, never its own.
    pub fn masked_decode(&self, query: &MaskedQueryBatch, encoded: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let (b, n_v, _) = encoded.dims3()?;
        if query.len() != b || mask.dims() != [b, n_v] {
            return Err(Error::Shape(format!(
                "decoder got {} queries, {:?} mask for {b} encoded videos of {n_v} clips",
                query.len(),
                mask.dims()
            )));
        }
        let weights = mask.reshape((b, 1, 1, n_v))?;
        let words = query
            .embeddings
            .broadcast_add(&query.is_mask.broadcast_mul(&self.mask_row)?)?;
        let n_q = words.dims3()?.1;
        let start = self.start_row.reshape((1, 1, ()))?.broadcast_as((b, 1, self.start_row.dims1()?))?;
        let words = Tensor::cat(&[&start, &words.narrow(1, 0, n_q - 1)?], 1)?;
        let mut h = self.word_in.forward(&words)?.broadcast_add(&self.query_pos)?;
        let self_mask = AttnMask {
            bias: Some(&self.causal),
            key_weights: None,
        };
        let cross = AttnMask {
            bias: None,
            key_weights: Some(&weights),
        };
        for layer in &self.decoder {
            h = layer.forward(&h, encoded, self_mask, cross)?;
        }
        self.dec_norm.forward(&h)
    }

    /// `[B, n_q, N_q]` vocabulary logits.
    pub fn word_logits(&self, hidden: &Tensor) -> Result<Tensor> {
        self.out.forward(hidden)
    }

    /// Softmax of the logits over the vocabulary.
    pub fn word_distribution(&self, hidden: &Tensor) -> Result<Tensor> {
        let logits = self.word_logits(hidden)?;
        let peak = logits.abs()?.flatten_all()?.max(0)?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !peak.is_finite() {
            return Err(Error::NonFiniteLoss("word logits".into()));
        }
        softmax_last(&logits)
    }

    /// Encode then decode, returning logits.
    pub fn reconstruct(&self, video: &Tensor, mask: &Tensor, query: &MaskedQueryBatch) -> Result<Tensor> {
        let enc = self.masked_encode(video, mask)?;
        let hidden = self.masked_decode(query, &enc, mask)?;
        self.word_logits(&hidden)
    }
}

/// Per-example summed cross-entropy `[B]` of logits against the batch targets,
/// with probabilities floored at `1e-12`.
pub fn sequence_ce(logits: &Tensor, query: &MaskedQueryBatch) -> Result<Tensor> {
    let max = logits.max_keepdim(D::Minus1)?.detach();
    let shifted = logits.broadcast_sub(&max)?;
    let log_z = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    let log_p = shifted.broadcast_sub(&log_z)?;
    let picked = log_p
        .gather(&query.targets.unsqueeze(D::Minus1)?.contiguous()?, D::Minus1)?
        .squeeze(D::Minus1)?;
    let floored = picked.maximum(crate::objectives::PROB_FLOOR.ln())?;
    Ok((floored.neg()? * &query.valid)?.sum(1)?)
}
