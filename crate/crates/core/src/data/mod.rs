//! Dataset ingestion: manifests, clip features, vocabulary, word embeddings
//! and the planted-moment synthetic generator.

mod embedding;
mod features;
mod manifest;
mod synth;
mod vocab;

pub use embedding::{load_embedding_table, write_embedding_table, EmbeddingTable};
pub use features::{
    decode_features, encode_features, feature_path, load_clip_features, read_features,
    sample_clips, write_features, ClipFeatureSequence, FeatureMatrix, FEATURE_MAGIC,
};
pub use manifest::{load_manifest, write_manifest, DatasetManifest, ManifestRecord, Split};
pub use synth::{generate_synthetic_dataset, SynthConfig, SyntheticDataset};
pub use vocab::{
    build_vocab, is_stopword, tokenize, tokenize_words, TokenizedQuery, Vocab, BOS_ID, MASK_ID,
    PAD_ID, RESERVED_TOKENS, UNK_ID,
};

/// File name of the manifest inside a data directory.
pub const MANIFEST_FILE: &str = "manifest.jsonl";
/// Directory holding one feature file per video inside a data directory.
pub const FEATURES_DIR: &str = "features";
/// File name of the word-embedding table inside a data directory.
pub const EMBEDDINGS_FILE: &str = "embeddings.txt";
