use std::collections::HashMap;

use crate::data::embedding::EmbeddingTable;
use crate::data::manifest::DatasetManifest;
use crate::error::{Error, Result};

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const BOS_ID: u32 = 2;
pub const MASK_ID: u32 = 3;
pub const RESERVED_TOKENS: [&str; 4] = ["<pad>", "<unk>", "<bos>", "<mask>"];

// Closed-class words. Everything else counts as a content word.
const STOPWORDS: &[&str] = &[
    // determiners
    "a", "an", "the", "this", "that", "these", "those", "some", "any", "each", "every", "another",
    "other", "such", "no", "all", "both", "either", "neither",
    // prepositions
    "in", "on", "at", "to", "from", "with", "without", "into", "onto", "of", "off", "for", "by",
    "about", "over", "under", "through", "across", "around", "after", "before", "behind",
    "between", "near", "up", "down", "out", "along", "toward", "towards", "upon", "while",
    "during", "against", "inside", "outside",
    // pronouns
    "i", "me", "my", "mine", "you", "your", "yours", "he", "him", "his", "she", "her", "hers",
    "it", "its", "we", "us", "our", "ours", "they", "them", "their", "theirs", "himself",
    "herself", "itself", "themselves", "someone", "somebody", "something", "who", "whom",
    "which", "what", "whose",
    // conjunctions
    "and", "or", "but", "nor", "so", "yet", "then", "than", "as", "if", "because", "when",
    "where", "also",
    // auxiliaries
    "is", "are", "was", "were", "be", "been", "being", "am", "do", "does", "did", "has", "have",
    "had", "can", "could", "will", "would", "shall", "should", "may", "might", "must", "not",
];

pub fn is_stopword(token: &str) -> bool {
    STOPWORDS.contains(&token)
}

/// Lowercases and splits on anything that is not alphanumeric.
pub fn tokenize_words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    content: Vec<bool>,
}

impl Vocab {
    /// Rebuilds a vocabulary from its non-reserved tokens, in id order.
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut all: Vec<String> = RESERVED_TOKENS.iter().map(|t| t.to_string()).collect();
        all.extend(tokens.into_iter().map(Into::into));
        let mut index = HashMap::with_capacity(all.len());
        for (i, t) in all.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate vocab token `{t}`")));
            }
        }
        let content = all
            .iter()
            .enumerate()
            .map(|(i, t)| i >= RESERVED_TOKENS.len() && !is_stopword(t))
            .collect();
        Ok(Self {
            tokens: all,
            index,
            content,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn is_content(&self, id: u32) -> bool {
        self.content.get(id as usize).copied().unwrap_or(false)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Tokens after the reserved block, in id order.
    pub fn word_tokens(&self) -> &[String] {
        &self.tokens[RESERVED_TOKENS.len()..]
    }
}

/// Keeps the most frequent tokens of the training queries (all queries when
/// there is no train split) up to `max_size` entries including reserved ids.
/// Frequency ties are broken lexicographically.
pub fn build_vocab(manifest: &DatasetManifest, max_size: usize) -> Result<Vocab> {
    if max_size < RESERVED_TOKENS.len() {
        return Err(Error::InvalidArgument(format!(
            "vocabulary size {max_size} is below the {} reserved tokens",
            RESERVED_TOKENS.len()
        )));
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    let has_train = manifest.train_records().next().is_some();
    for r in manifest
        .records
        .iter()
        .filter(|r| !has_train || !r.is_eval())
    {
        for w in tokenize_words(&r.query) {
            *counts.entry(w).or_default() += 1;
        }
    }
    for t in RESERVED_TOKENS {
        counts.remove(t);
    }
    let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(max_size - RESERVED_TOKENS.len());
    Vocab::from_tokens(ranked.into_iter().map(|(t, _)| t))
}

/// A fixed-length query: ids, padding, content flags and embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenizedQuery {
    pub ids: Vec<u32>,
    pub valid_len: usize,
    pub content_flags: Vec<bool>,
    /// `n_q x d_w`, row-major.
    pub embeddings: Vec<f32>,
    pub d_w: usize,
}

impl TokenizedQuery {
    pub fn n_q(&self) -> usize {
        self.ids.len()
    }

    pub fn embedding(&self, pos: usize) -> &[f32] {
        &self.embeddings[pos * self.d_w..(pos + 1) * self.d_w]
    }
}

pub fn tokenize(text: &str, vocab: &Vocab, n_q: usize, table: &EmbeddingTable) -> TokenizedQuery {
    let d_w = table.dim();
    let mut ids: Vec<u32> = tokenize_words(text)
        .iter()
        .take(n_q)
        .map(|w| vocab.id(w).unwrap_or(UNK_ID))
        .collect();
    let valid_len = ids.len();
    ids.resize(n_q, PAD_ID);
    let content_flags = ids
        .iter()
        .enumerate()
        .map(|(i, &id)| i < valid_len && vocab.is_content(id))
        .collect();
    let mut embeddings = Vec::with_capacity(n_q * d_w);
    for &id in &ids {
        embeddings.extend_from_slice(table.row(id));
    }
    TokenizedQuery {
        ids,
        valid_len,
        content_flags,
        embeddings,
        d_w,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::manifest::{ManifestRecord, Split};
    use proptest::prelude::*;

    fn manifest(queries: &[&str]) -> DatasetManifest {
        DatasetManifest {
            records: queries
                .iter()
                .enumerate()
                .map(|(i, q)| ManifestRecord {
                    video_id: format!("v{i}"),
                    duration: 10.0,
                    query: q.to_string(),
                    split: Split::Train,
                    start: None,
                    end: None,
                })
                .collect(),
        }
    }

    #[test]
    fn small_corpus_fits_entirely() {
        let m = manifest(&["a b c d e", "f g h i j"]);
        let v = build_vocab(&m, 50).unwrap();
        assert_eq!(v.len(), 10 + RESERVED_TOKENS.len());
    }

    #[test]
    fn ties_break_lexicographically() {
        // "zeta" and "alpha" both appear once; only one slot is left.
        let m = manifest(&["common common alpha zeta"]);
        let v = build_vocab(&m, RESERVED_TOKENS.len() + 2).unwrap();
        assert_eq!(v.word_tokens(), &["common".to_string(), "alpha".to_string()]);
    }

    #[test]
    fn too_small_vocab_is_rejected() {
        assert!(build_vocab(&manifest(&["x"]), 3).is_err());
    }

    #[test]
    fn reserved_ids_are_distinct_and_dense() {
        let v = build_vocab(&manifest(&["person walks"]), 10).unwrap();
        for (i, t) in RESERVED_TOKENS.iter().enumerate() {
            assert_eq!(v.id(t), Some(i as u32));
        }
        for id in 0..v.len() as u32 {
            assert_eq!(v.id(v.token(id).unwrap()), Some(id));
        }
    }

    #[test]
    fn content_flags_follow_stoplist() {
        let v = build_vocab(&manifest(&["the man opens a door"]), 20).unwrap();
        assert!(!v.is_content(v.id("the").unwrap()));
        assert!(!v.is_content(v.id("a").unwrap()));
        assert!(v.is_content(v.id("man").unwrap()));
        assert!(v.is_content(v.id("opens").unwrap()));
        assert!(!v.is_content(MASK_ID));
    }

    fn table_for(v: &Vocab) -> EmbeddingTable {
        EmbeddingTable::random(v, 4, 3)
    }

    #[test]
    fn tokenize_pads_truncates_and_marks_unknowns() {
        let words: Vec<String> = (0..25).map(|i| format!("w{i}")).collect();
        let v = Vocab::from_tokens(["a", "man", "runs"].into_iter().chain(words.iter().map(|s| s.as_str())))
            .unwrap();
        let t = table_for(&v);

        let q = tokenize("A man runs.", &v, 5, &t);
        assert_eq!(q.valid_len, 3);
        assert_eq!(&q.ids[3..], &[PAD_ID, PAD_ID]);
        assert!(q.embedding(4).iter().all(|&x| x == 0.0));

        let long = words.join(" ");
        let q = tokenize(&long, &v, 20, &t);
        assert_eq!(q.valid_len, 20);
        assert_eq!(q.ids[19], v.id("w19").unwrap());

        let q = tokenize("a zebra runs", &v, 5, &t);
        assert_eq!(q.ids[1], UNK_ID);
    }

    proptest! {
        #[test]
        fn tokenize_is_fixed_length_and_roundtrips(words in proptest::collection::vec("[a-d]{1,3}", 0..12), n_q in 1usize..10) {
            let text = words.join(" ");
            let m = manifest(&[text.as_str(), "x"]);
            let v = build_vocab(&m, 100).unwrap();
            let t = table_for(&v);
            let q = tokenize(&text, &v, n_q, &t);
            prop_assert_eq!(q.ids.len(), n_q);
            prop_assert_eq!(q.embeddings.len(), n_q * 4);
            prop_assert!(q.valid_len <= n_q);
            for (i, w) in words.iter().take(n_q).enumerate() {
                prop_assert_eq!(v.token(q.ids[i]), Some(w.as_str()));
            }
        }
    }
}
