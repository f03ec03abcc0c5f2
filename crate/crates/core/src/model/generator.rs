//! Positive-mask generation: cross-modal fusion, proposal heads, Gaussian
//! masks, mask aggregation and negative mining.

use candle_core::{DType, Device, IndexOp, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::config::{FusionMode, TrainConfig};
use crate::error::{Error, Result};
use crate::model::nn::{
    positional_table, softmax_last, AttnMask, DecoderLayer, EncoderLayer, Linear, ParamStore,
    Scope,
};
use crate::types::{MaskTriplet, Proposal, ProposalSet};

/// Widths are clamped to at least this before building masks.
pub const WIDTH_FLOOR: f64 = 1e-3;

/// Mask value of clip `j` for a proposal: `exp(-alpha ((j+1)/n_v - c)^2 / w^2)`.
pub fn gaussian_weight(j: usize, n_v: usize, center: f64, width: f64, alpha: f64) -> f64 {
    let d = (j + 1) as f64 / n_v as f64 - center;
    (-alpha * d * d / (width * width)).exp()
}

/// Partial derivatives of [`gaussian_weight`] with respect to center and width.
pub fn gaussian_weight_grad(j: usize, n_v: usize, center: f64, width: f64, alpha: f64) -> (f64, f64) {
    let d = (j + 1) as f64 / n_v as f64 - center;
    let m = gaussian_weight(j, n_v, center, width, alpha);
    let w2 = width * width;
    (m * 2.0 * alpha * d / w2, m * 2.0 * alpha * d * d / (w2 * width))
}

/// `k x n_v` Gaussian mask values, one row per proposal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskMatrix {
    pub k: usize,
    pub n_v: usize,
    pub values: Vec<f64>,
}

impl MaskMatrix {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.n_v..(i + 1) * self.n_v]
    }
}

pub fn build_gaussian_masks(proposals: &ProposalSet, n_v: usize, alpha: f64) -> Result<MaskMatrix> {
    if n_v == 0 {
        return Err(Error::InvalidArgument("n_v must be positive".into()));
    }
    let mut values = Vec::with_capacity(proposals.len() * n_v);
    for p in proposals.iter() {
        if !(p.width > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "Gaussian mask needs a positive width, got {}",
                p.width
            )));
        }
        values.extend((0..n_v).map(|j| gaussian_weight(j, n_v, p.center, p.width, alpha)));
    }
    Ok(MaskMatrix {
        k: proposals.len(),
        n_v,
        values,
    })
}

/// Scores every mask row with `w_m`, softmaxes the scores across masks and
/// returns the weighted sum of rows together with the weights.
pub fn aggregate_masks(masks: &MaskMatrix, w_m: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if w_m.len() != masks.n_v || masks.k == 0 {
        return Err(Error::Shape(format!(
            "aggregation weight of length {} for {} masks of length {}",
            w_m.len(),
            masks.k,
            masks.n_v
        )));
    }
    let scores: Vec<f64> = (0..masks.k)
        .map(|i| masks.row(i).iter().zip(w_m).map(|(m, w)| m * w).sum())
        .collect();
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = exp.iter().sum();
    let beta: Vec<f64> = exp.iter().map(|e| e / z).collect();
    let mut positive = vec![0.0; masks.n_v];
    for (i, b) in beta.iter().enumerate() {
        for (p, m) in positive.iter_mut().zip(masks.row(i)) {
            *p += b * m;
        }
    }
    Ok((positive, beta))
}

/// Easy negative is the complement of the positive mask; hard negative is
/// the whole video.
pub fn mine_negatives(positive: &[f64]) -> MaskTriplet {
    MaskTriplet {
        positive: positive.to_vec(),
        easy: positive.iter().map(|p| 1.0 - p).collect(),
        hard: vec![1.0; positive.len()],
    }
}

/// Token embeddings and padding bias of a query batch.
#[derive(Clone, Debug)]
pub struct QueryInput {
    /// `[B, n_q, d_w]`
    pub embeddings: Tensor,
    /// `[B, 1, 1, n_q]`
    pub pad_bias: Tensor,
}

impl QueryInput {
    pub fn cat(parts: &[&QueryInput]) -> Result<QueryInput> {
        let emb: Vec<&Tensor> = parts.iter().map(|q| &q.embeddings).collect();
        let bias: Vec<&Tensor> = parts.iter().map(|q| &q.pad_bias).collect();
        Ok(QueryInput {
            embeddings: Tensor::cat(&emb, 0)?,
            pad_bias: Tensor::cat(&bias, 0)?,
        })
    }
}

/// Query encoder plus video decoder with cross-attention to the query.
pub struct FusionEncoder {
    query_in: Linear,
    query_pos: Tensor,
    video_in: Linear,
    video_pos: Tensor,
    encoder: Vec<EncoderLayer>,
    decoder: Vec<DecoderLayer>,
}

impl FusionEncoder {
    fn new(mut s: Scope<'_>, cfg: &TrainConfig) -> Result<Self> {
        let d = cfg.d_h;
        let encoder = (0..cfg.layers)
            .map(|i| EncoderLayer::new(s.pp(&format!("encoder.{i}")), d, cfg.heads))
            .collect::<Result<_>>()?;
        let decoder = (0..cfg.layers)
            .map(|i| DecoderLayer::new(s.pp(&format!("decoder.{i}")), d, cfg.heads))
            .collect::<Result<_>>()?;
        Ok(Self {
            query_in: Linear::new(s.pp("query_in"), cfg.d_w, d, true)?,
            query_pos: positional_table(s.pp("query_pos"), cfg.n_q, d)?,
            video_in: Linear::new(s.pp("video_in"), cfg.d_v, d, true)?,
            video_pos: positional_table(s.pp("video_pos"), cfg.n_v, d)?,
            encoder,
            decoder,
        })
    }

    /// Projected video stream with positions, the decoder's input.
    pub fn video_stream(&self, video: &Tensor) -> Result<Tensor> {
        Ok(self.video_in.forward(video)?.broadcast_add(&self.video_pos)?)
    }

    /// `[B, n_v, d_v]` video and query batch to `[B, n_v, d_h]`.
    pub fn forward(&self, video: &Tensor, query: &QueryInput) -> Result<Tensor> {
        let mut q = self
            .query_in
            .forward(&query.embeddings)?
            .broadcast_add(&self.query_pos)?;
        let pad = AttnMask {
            bias: Some(&query.pad_bias),
            key_weights: None,
        };
        for layer in &self.encoder {
            q = layer.forward(&q, pad)?;
        }
        let mut h = self.video_stream(video)?;
        for layer in &self.decoder {
            h = layer.forward(&h, &q, AttnMask::default(), pad)?;
        }
        Ok(h)
    }
}

/// Proposal prediction, mask construction and aggregation.
pub struct ProposalHead {
    mode: FusionMode,
    w_p: Linear,
    w_h: Option<Linear>,
    w_m: Linear,
    positions: Tensor,
    k: usize,
    alpha: f64,
    width_cap: f64,
}

/// Centers and widths `[B, k]` plus the stream-fusion weights `[B, 2]`
/// (attention mode only).
pub struct RawProposals {
    pub centers: Tensor,
    pub widths: Tensor,
    pub fusion_beta: Option<Tensor>,
}

impl ProposalHead {
    fn new(mut s: Scope<'_>, cfg: &TrainConfig, dtype: DType, device: &Device) -> Result<Self> {
        let (w_p, w_h) = match cfg.fusion_mode {
            FusionMode::Concat => (Linear::new(s.pp("w_p"), 2 * cfg.d_h, 2 * cfg.k, true)?, None),
            FusionMode::Attention => (
                Linear::new(s.pp("w_p"), cfg.d_h, 2 * cfg.k, true)?,
                Some(Linear::new(s.pp("w_h"), cfg.d_h, 1, false)?),
            ),
        };
        let positions: Vec<f64> = (1..=cfg.n_v).map(|j| j as f64 / cfg.n_v as f64).collect();
        Ok(Self {
            mode: cfg.fusion_mode,
            w_p,
            w_h,
            w_m: Linear::new(s.pp("w_m"), cfg.n_v, 1, false)?,
            positions: Tensor::from_vec(positions, (1, 1, cfg.n_v), device)?.to_dtype(dtype)?,
            k: cfg.k,
            alpha: cfg.alpha,
            width_cap: cfg.width_cap,
        })
    }

    pub fn mode(&self) -> FusionMode {
        self.mode
    }

    fn split(&self, logits: &Tensor) -> Result<RawProposals> {
        let cw = candle_nn::ops::sigmoid(logits)?;
        let centers = cw.narrow(1, 0, self.k)?;
        let widths = (cw.narrow(1, self.k, self.k)? * self.width_cap)?;
        Ok(RawProposals {
            centers,
            widths,
            fusion_beta: None,
        })
    }

    /// `sigmoid([h_f ‖ h_i] W_p)`.
    pub fn predict_concat(&self, h_f: &Tensor, h_i: &Tensor) -> Result<RawProposals> {
        let x = Tensor::cat(&[h_f, h_i], 1)?;
        self.split(&self.w_p.forward(&x)?)
    }

    /// Additive attention over the two summaries, then `sigmoid(ĥ W_p)`.
    pub fn predict_attn(&self, h_f: &Tensor, h_i: &Tensor) -> Result<RawProposals> {
        let w_h = self
            .w_h
            .as_ref()
            .ok_or_else(|| Error::Config("attention head requested in concat mode".into()))?;
        let scores = Tensor::cat(&[w_h.forward(h_f)?, w_h.forward(h_i)?], 1)?;
        let beta = softmax_last(&scores)?;
        let fused = (h_f.broadcast_mul(&beta.narrow(1, 0, 1)?)?
            + h_i.broadcast_mul(&beta.narrow(1, 1, 1)?)?)?;
        let mut out = self.split(&self.w_p.forward(&fused)?)?;
        out.fusion_beta = Some(beta);
        Ok(out)
    }

    pub fn predict(&self, h_f: &Tensor, h_i: &Tensor) -> Result<RawProposals> {
        match self.mode {
            FusionMode::Concat => self.predict_concat(h_f, h_i),
            FusionMode::Attention => self.predict_attn(h_f, h_i),
        }
    }

    /// `[B, k]` centers and widths to `[B, k, n_v]` masks.
    pub fn gaussian_masks(&self, centers: &Tensor, widths: &Tensor) -> Result<Tensor> {
        gaussian_masks_tensor(centers, widths, &self.positions, self.alpha)
    }

    /// Returns the positive mask `[B, n_v]` and aggregation weights `[B, k]`.
    pub fn aggregate(&self, masks: &Tensor) -> Result<(Tensor, Tensor)> {
        let scores = self.w_m.forward(masks)?.squeeze(D::Minus1)?;
        let beta = softmax_last(&scores)?;
        let positive = masks.broadcast_mul(&beta.unsqueeze(2)?)?.sum(1)?;
        Ok((positive, beta))
    }
}

/// Tensor form of [`gaussian_weight`]: `positions` is `[1, 1, n_v]`.
pub fn gaussian_masks_tensor(centers: &Tensor, widths: &Tensor, positions: &Tensor, alpha: f64) -> Result<Tensor> {
    let widths = widths.maximum(WIDTH_FLOOR)?;
    let diff = positions.broadcast_sub(&centers.unsqueeze(2)?)?;
    let scaled = diff.sqr()?.broadcast_div(&widths.sqr()?.unsqueeze(2)?)?;
    Ok((scaled * -alpha)?.exp()?)
}

/// Everything the generator produces for one batch.
pub struct GeneratorOutput {
    /// `[B, k]`
    pub centers: Tensor,
    /// `[B, k]`, after the width floor.
    pub widths: Tensor,
    pub fusion_beta: Option<Tensor>,
    /// `[B, k, n_v]`
    pub masks: Tensor,
    /// `[B, k]` aggregation weights, also the per-proposal reliability.
    pub agg_beta: Tensor,
    /// `[B, n_v]`
    pub positive: Tensor,
}

impl GeneratorOutput {
    /// Host-side proposals of batch item `b`, scored by aggregation weight.
    pub fn proposals(&self, b: usize, width_cap: f64) -> Result<ProposalSet> {
        let c = self.centers.i(b)?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        let w = self.widths.i(b)?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        let s = self.agg_beta.i(b)?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        let props = c
            .iter()
            .zip(&w)
            .zip(&s)
            .map(|((&c, &w), &s)| {
                Proposal::new(c.clamp(0.0, 1.0), w.clamp(WIDTH_FLOOR, width_cap), width_cap)
                    .map(|p| p.with_score(s))
            })
            .collect::<Result<Vec<_>>>()?;
        ProposalSet::new(props)
    }
}

/// Fusion encoder and proposal head with their parameters.
pub struct MaskGenerator {
    store: ParamStore,
    fusion: FusionEncoder,
    head: ProposalHead,
    mt_enabled: bool,
    width_cap: f64,
}

impl MaskGenerator {
    pub fn new(cfg: &TrainConfig, dtype: DType, device: &Device) -> Result<Self> {
        let mut store = ParamStore::new(cfg.seed ^ 0x6d61_736b_6765_6e00, dtype, device);
        let mut root = store.root("generator");
        let fusion = FusionEncoder::new(root.pp("fusion"), cfg)?;
        let head = ProposalHead::new(root.pp("head"), cfg, dtype, device)?;
        Ok(Self {
            store,
            fusion,
            head,
            mt_enabled: cfg.mt_enabled,
            width_cap: cfg.width_cap,
        })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn fusion(&self) -> &FusionEncoder {
        &self.fusion
    }

    pub fn head(&self) -> &ProposalHead {
        &self.head
    }

    pub fn width_cap(&self) -> f64 {
        self.width_cap
    }

    /// Fused sequence `[B, n_v, d_h]`.
    pub fn fuse(&self, video: &Tensor, query: &QueryInput) -> Result<Tensor> {
        let h = self.fusion.forward(video, query)?;
        if h.dims3()?.0 > 0 {
            let finite = h.abs()?.max_keepdim(D::Minus1)?.flatten_all()?.max(0)?;
            if !finite.to_dtype(DType::F64)?.to_scalar::<f64>()?.is_finite() {
                return Err(Error::Shape("non-finite fused activations".into()));
            }
        }
        Ok(h)
    }

    /// Runs both query streams (or only the forward one when the inverse
    /// stream is disabled, reusing its summary in place of the inverse one).
    pub fn forward(&self, video: &Tensor, fwd: &QueryInput, inv: Option<&QueryInput>) -> Result<GeneratorOutput> {
        let b = video.dims3()?.0;
        let n_v = video.dims3()?.1;
        let (h_f, h_i) = match (self.mt_enabled, inv) {
            (true, Some(inv)) => {
                let videos = Tensor::cat(&[video, video], 0)?;
                let queries = QueryInput::cat(&[fwd, inv])?;
                let h = self.fuse(&videos, &queries)?;
                let last = h.narrow(1, n_v - 1, 1)?.squeeze(1)?;
                (last.narrow(0, 0, b)?, last.narrow(0, b, b)?)
            }
            (true, None) => {
                return Err(Error::InvalidArgument(
                    "inverse query stream enabled but no inverse queries given".into(),
                ))
            }
            (false, _) => {
                let h = self.fuse(video, fwd)?;
                let last = h.narrow(1, n_v - 1, 1)?.squeeze(1)?;
                (last.clone(), last)
            }
        };
        let raw = self.head.predict(&h_f, &h_i)?;
        let widths = raw.widths.maximum(WIDTH_FLOOR)?;
        let masks = self.head.gaussian_masks(&raw.centers, &widths)?;
        let (positive, agg_beta) = self.head.aggregate(&masks)?;
        Ok(GeneratorOutput {
            centers: raw.centers,
            widths,
            fusion_beta: raw.fusion_beta,
            masks,
            agg_beta,
            positive,
        })
    }
}
