//! Turns a data directory into tensors-ready examples and batches.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::config::TrainConfig;
use crate::data::{
    build_vocab, load_clip_features, load_embedding_table, load_manifest, sample_clips, tokenize,
    ClipFeatureSequence, DatasetManifest, EmbeddingTable, ManifestRecord, TokenizedQuery, Vocab,
    EMBEDDINGS_FILE, FEATURES_DIR, MANIFEST_FILE,
};
use crate::error::{Error, Result};
use crate::model::nn::padding_bias;
use crate::model::QueryInput;
use crate::types::Moment;

/// One query against one video.
#[derive(Clone, Debug)]
pub struct Example {
    /// Index into [`PreparedDataset::videos`].
    pub video: usize,
    pub text: String,
    pub query: TokenizedQuery,
    pub ground_truth: Option<Moment>,
}

/// Sampled videos, vocabulary and embeddings of a data directory.
#[derive(Clone, Debug)]
pub struct PreparedDataset {
    pub vocab: Vocab,
    pub table: EmbeddingTable,
    pub videos: Vec<ClipFeatureSequence>,
    pub train: Vec<Example>,
    pub eval: Vec<Example>,
}

/// Word embeddings from `embeddings.txt`, or seeded random rows when the
/// directory has none.
pub fn load_table(dir: &Path, vocab: &Vocab, cfg: &TrainConfig) -> Result<EmbeddingTable> {
    let path = dir.join(EMBEDDINGS_FILE);
    if path.exists() {
        load_embedding_table(&path, vocab, cfg.d_w, cfg.seed)
    } else {
        log::warn!("{} not found; using random word embeddings", path.display());
        Ok(EmbeddingTable::random(vocab, cfg.d_w, cfg.seed))
    }
}

/// Videos referenced by `records`, sampled to `n_v` clips, loaded once each.
pub struct VideoCache {
    feature_dir: std::path::PathBuf,
    index: HashMap<String, usize>,
    pub videos: Vec<ClipFeatureSequence>,
}

impl VideoCache {
    pub fn new(data_dir: &Path) -> Self {
        Self {
            feature_dir: data_dir.join(FEATURES_DIR),
            index: HashMap::new(),
            videos: Vec::new(),
        }
    }

    pub fn get(&mut self, record: &ManifestRecord, cfg: &TrainConfig) -> Result<usize> {
        if let Some(&i) = self.index.get(&record.video_id) {
            return Ok(i);
        }
        let raw = load_clip_features(&self.feature_dir, &record.video_id, cfg.d_v)?;
        let seq = sample_clips(&raw, cfg.n_v, &record.video_id, record.duration)?;
        self.videos.push(seq);
        self.index.insert(record.video_id.clone(), self.videos.len() - 1);
        Ok(self.videos.len() - 1)
    }
}

impl PreparedDataset {
    /// Loads the manifest, vocabulary, embeddings and every referenced
    /// video, checking dimensions against `cfg` before any training.
    pub fn load(dir: &Path, cfg: &TrainConfig) -> Result<Self> {
        let manifest = load_manifest(&dir.join(MANIFEST_FILE))?;
        let vocab = build_vocab(&manifest, cfg.vocab_size)?;
        let table = load_table(dir, &vocab, cfg)?;
        Self::from_manifest(dir, &manifest, vocab, table, cfg)
    }

    /// Like [`load`](Self::load) but with a fixed vocabulary and embedding
    /// table, as stored in a checkpoint.
    pub fn from_manifest(
        dir: &Path,
        manifest: &DatasetManifest,
        vocab: Vocab,
        table: EmbeddingTable,
        cfg: &TrainConfig,
    ) -> Result<Self> {
        if table.dim() != cfg.d_w {
            return Err(Error::Config(format!(
                "word embeddings have width {}, configuration expects d_w = {}",
                table.dim(),
                cfg.d_w
            )));
        }
        if vocab.len() > cfg.vocab_size || table.len() != vocab.len() {
            return Err(Error::Config(format!(
                "vocabulary of {} words (table rows {}) does not fit vocab_size = {}",
                vocab.len(),
                table.len(),
                cfg.vocab_size
            )));
        }
        let mut cache = VideoCache::new(dir);
        let mut train = Vec::new();
        let mut eval = Vec::new();
        for r in &manifest.records {
            let video = cache.get(r, cfg)?;
            let query = tokenize(&r.query, &vocab, cfg.n_q, &table);
            if query.valid_len == 0 {
                log::warn!("skipping `{}`: query has no tokens", r.video_id);
                continue;
            }
            let ex = Example {
                video,
                text: r.query.clone(),
                query,
                ground_truth: r.ground_truth(),
            };
            if r.is_eval() {
                eval.push(ex);
            } else {
                train.push(ex);
            }
        }
        Ok(Self {
            vocab,
            table,
            videos: cache.videos,
            train,
            eval,
        })
    }
}

/// `[B, n_v, d_v]` tensor of sampled clip features.
pub fn video_tensor(videos: &[&ClipFeatureSequence], dtype: DType, device: &Device) -> Result<Tensor> {
    let first = videos
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty video batch".into()))?;
    let (n, d) = (first.n_clips(), first.dim());
    let mut data = Vec::with_capacity(videos.len() * n * d);
    for v in videos {
        if v.n_clips() != n || v.dim() != d {
            return Err(Error::Shape(format!("video `{}` has a different shape", v.video_id)));
        }
        data.extend_from_slice(&v.features.data);
    }
    Ok(Tensor::from_vec(data, (videos.len(), n, d), device)?.to_dtype(dtype)?)
}

/// Embeddings and padding bias of a query batch.
pub fn query_input(queries: &[&TokenizedQuery], dtype: DType, device: &Device) -> Result<QueryInput> {
    let first = queries
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty query batch".into()))?;
    let (n_q, d_w) = (first.n_q(), first.d_w);
    let mut data = Vec::with_capacity(queries.len() * n_q * d_w);
    for q in queries {
        if q.n_q() != n_q || q.d_w != d_w {
            return Err(Error::Shape("queries of different shapes in one batch".into()));
        }
        data.extend_from_slice(&q.embeddings);
    }
    let lens: Vec<usize> = queries.iter().map(|q| q.valid_len).collect();
    Ok(QueryInput {
        embeddings: Tensor::from_vec(data, (queries.len(), n_q, d_w), device)?.to_dtype(dtype)?,
        pad_bias: padding_bias(&lens, n_q, dtype, device)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_dataset, SynthConfig};

    #[test]
    fn synthetic_directory_loads() {
        let dir = tempfile::tempdir().unwrap();
        let synth = SynthConfig {
            n_train: 20,
            n_test: 5,
            ..SynthConfig::default()
        };
        generate_synthetic_dataset(&synth, 7).unwrap().write_to(dir.path()).unwrap();
        let cfg = TrainConfig::default();
        let ds = PreparedDataset::load(dir.path(), &cfg).unwrap();
        assert_eq!(ds.train.len(), 20);
        assert_eq!(ds.eval.len(), 5);
        assert!(ds.eval.iter().all(|e| e.ground_truth.is_some()));
        assert_eq!(ds.videos.len(), 25);
        let vids: Vec<_> = ds.videos.iter().take(3).collect();
        let t = video_tensor(&vids, DType::F32, &Device::Cpu).unwrap();
        assert_eq!(t.dims(), &[3, cfg.n_v, cfg.d_v]);
        let qs: Vec<_> = ds.train.iter().take(2).map(|e| &e.query).collect();
        let q = query_input(&qs, DType::F32, &Device::Cpu).unwrap();
        assert_eq!(q.embeddings.dims(), &[2, cfg.n_q, cfg.d_w]);
        assert_eq!(q.pad_bias.dims(), &[2, 1, 1, cfg.n_q]);
    }

    #[test]
    fn dimension_mismatch_is_reported_up_front() {
        let dir = tempfile::tempdir().unwrap();
        let synth = SynthConfig {
            n_train: 4,
            n_test: 1,
            ..SynthConfig::default()
        };
        generate_synthetic_dataset(&synth, 1).unwrap().write_to(dir.path()).unwrap();
        let cfg = TrainConfig {
            d_v: 8,
            ..TrainConfig::default()
        };
        assert!(matches!(PreparedDataset::load(dir.path(), &cfg), Err(Error::WidthMismatch { .. })));
        let cfg = TrainConfig {
            d_w: 8,
            ..TrainConfig::default()
        };
        assert!(PreparedDataset::load(dir.path(), &cfg).is_err());
    }
}
