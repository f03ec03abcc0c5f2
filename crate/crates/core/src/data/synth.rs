//! Planted-moment synthetic corpus.
//!
//! Every video hides one moment whose clips carry a signature derived from
//! the content words of its query. Each content word owns a visual
//! prototype that is a fixed linear image of its word embedding, so the
//! query text is informative about which clips match it. Clips outside the
//! moment carry independent noise.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::embedding::write_embedding_table;
use crate::data::features::{feature_path, write_features, FeatureMatrix};
use crate::data::manifest::{write_manifest, DatasetManifest, ManifestRecord, Split};
use crate::data::vocab::RESERVED_TOKENS;
use crate::data::{EMBEDDINGS_FILE, FEATURES_DIR, MANIFEST_FILE};
use crate::error::{Error, Result};

const TEMPLATE_WORDS: [&str; 3] = ["a", "person", "the"];
const SLOTS: [&str; 3] = ["act", "attr", "obj"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_train: usize,
    pub n_test: usize,
    /// Raw clips per video.
    pub n_clips: usize,
    pub d_v: usize,
    pub d_w: usize,
    /// Target vocabulary size, reserved tokens included.
    pub vocab_size: usize,
    /// Noise amplitude on moment clips.
    pub sigma: f64,
    /// Noise amplitude on clips outside the moment.
    pub background: f64,
    /// Moment length as a fraction of the video, `[min, max]`.
    pub moment_frac: (f64, f64),
    /// Video duration range in seconds.
    pub duration: (f64, f64),
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_train: 500,
            n_test: 100,
            n_clips: 32,
            d_v: 16,
            d_w: 16,
            vocab_size: 50,
            sigma: 0.3,
            background: 0.3,
            moment_frac: (0.15, 0.4),
            duration: (20.0, 60.0),
        }
    }
}

impl SynthConfig {
    fn words_per_slot(&self) -> usize {
        self.vocab_size
            .saturating_sub(RESERVED_TOKENS.len() + TEMPLATE_WORDS.len())
            / SLOTS.len()
    }

    fn validate(&self) -> Result<()> {
        let (lo, hi) = self.moment_frac;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::InvalidArgument(format!(
                "moment fraction range ({lo}, {hi}) is empty or non-positive"
            )));
        }
        if hi > 1.0 {
            return Err(Error::InvalidArgument(format!(
                "moments of up to {hi} of the video cannot fit inside it"
            )));
        }
        if self.n_clips == 0 || self.d_v == 0 || self.d_w == 0 {
            return Err(Error::InvalidArgument("clip count and dimensions must be positive".into()));
        }
        if self.words_per_slot() < 2 {
            return Err(Error::InvalidArgument(format!(
                "vocabulary size {} leaves fewer than 2 words per slot",
                self.vocab_size
            )));
        }
        let (d0, d1) = self.duration;
        if !(d0 > 0.0 && d0 <= d1) {
            return Err(Error::InvalidArgument(format!("bad duration range ({d0}, {d1})")));
        }
        if !(self.sigma >= 0.0 && self.background >= 0.0) {
            return Err(Error::InvalidArgument("noise amplitudes must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticVideo {
    pub video_id: String,
    pub features: FeatureMatrix,
    pub signature: Vec<f32>,
    /// Word ids of the query's content slots.
    pub words: Vec<usize>,
    /// Planted moment as clip indices `[start, end)`.
    pub clips: (usize, usize),
}

#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub manifest: DatasetManifest,
    pub videos: Vec<SyntheticVideo>,
    /// Word embedding rows for every generated word, in vocabulary order.
    pub words: Vec<(String, Vec<f32>)>,
}

impl SyntheticDataset {
    /// Writes `manifest.jsonl`, `features/*.mcft` and `embeddings.txt`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        write_manifest(&dir.join(MANIFEST_FILE), &self.manifest)?;
        let feat_dir = dir.join(FEATURES_DIR);
        for v in &self.videos {
            write_features(&feature_path(&feat_dir, &v.video_id), &v.features)?;
        }
        write_embedding_table(
            &dir.join(EMBEDDINGS_FILE),
            self.words.first().map_or(0, |w| w.1.len()),
            self.words.iter().map(|(t, r)| (t.as_str(), r.as_slice())),
        )
    }
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f32> {
    (0..n)
        .map(|_| {
            let x: f64 = StandardNormal.sample(rng);
            (x * scale) as f32
        })
        .collect()
}

pub fn generate_synthetic_dataset(config: &SynthConfig, seed: u64) -> Result<SyntheticDataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per_slot = config.words_per_slot();

    let mut words: Vec<(String, Vec<f32>)> = TEMPLATE_WORDS
        .iter()
        .map(|w| (w.to_string(), normal_vec(&mut rng, config.d_w, 1.0)))
        .collect();
    let mut slot_words: Vec<Vec<usize>> = Vec::new();
    for slot in SLOTS {
        let mut ids = Vec::new();
        for i in 0..per_slot {
            ids.push(words.len());
            words.push((format!("{slot}{i:02}"), normal_vec(&mut rng, config.d_w, 1.0)));
        }
        slot_words.push(ids);
    }

    // prototype = A e / sqrt(d_w) with A ~ N(0, 1)^{d_v x d_w}
    let proj = normal_vec(&mut rng, config.d_v * config.d_w, 1.0);
    let norm = (config.d_w as f64).sqrt();
    let prototype = |emb: &[f32]| -> Vec<f64> {
        (0..config.d_v)
            .map(|r| {
                let row = &proj[r * config.d_w..(r + 1) * config.d_w];
                row.iter().zip(emb).map(|(a, e)| (*a as f64) * (*e as f64)).sum::<f64>() / norm
            })
            .collect()
    };

    let event_signature = |picks: &[usize]| -> Vec<f32> {
        let mut sig = vec![0.0f64; config.d_v];
        for &p in picks {
            for (s, v) in sig.iter_mut().zip(prototype(&words[p].1)) {
                *s += v / (SLOTS.len() as f64).sqrt();
            }
        }
        sig.into_iter().map(|x| x as f32).collect()
    };

    let mut records = Vec::new();
    let mut videos = Vec::new();
    let total = config.n_train + config.n_test;
    for idx in 0..total {
        let (split, video_id) = if idx < config.n_train {
            (Split::Train, format!("syn_train_{idx:05}"))
        } else {
            (Split::Test, format!("syn_test_{:05}", idx - config.n_train))
        };
        let picks: Vec<usize> = slot_words
            .iter()
            .map(|ids| ids[rng.gen_range(0..ids.len())])
            .collect();
        let query = format!(
            "a person {} the {} {}",
            words[picks[0]].0, words[picks[1]].0, words[picks[2]].0
        );
        let signature = event_signature(&picks);
        let frac = rng.gen_range(config.moment_frac.0..=config.moment_frac.1);
        let len = ((frac * config.n_clips as f64).round() as usize).clamp(1, config.n_clips);
        let start = rng.gen_range(0..=config.n_clips - len);
        let duration = rng.gen_range(config.duration.0..=config.duration.1);

        let mut data = Vec::with_capacity(config.n_clips * config.d_v);
        for j in 0..config.n_clips {
            if (start..start + len).contains(&j) {
                let noise = normal_vec(&mut rng, config.d_v, config.sigma);
                data.extend(signature.iter().zip(noise).map(|(s, n)| s + n));
            } else {
                data.extend(normal_vec(&mut rng, config.d_v, config.background));
            }
        }
        let features = FeatureMatrix::new(config.n_clips, config.d_v, data)?;

        let step = duration / config.n_clips as f64;
        let gt = split == Split::Test;
        records.push(ManifestRecord {
            video_id: video_id.clone(),
            duration,
            query,
            split,
            start: gt.then(|| start as f64 * step),
            end: gt.then(|| ((start + len) as f64 * step).min(duration)),
        });
        videos.push(SyntheticVideo {
            video_id,
            features,
            signature,
            words: picks,
            clips: (start, start + len),
        });
    }
    Ok(SyntheticDataset {
        manifest: DatasetManifest { records },
        videos,
        words,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_vocab, load_manifest};

    fn small() -> SynthConfig {
        SynthConfig {
            n_train: 6,
            n_test: 4,
            ..SynthConfig::default()
        }
    }

    fn read_tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
        let mut out = Vec::new();
        let mut stack = vec![dir.to_path_buf()];
        while let Some(d) = stack.pop() {
            for e in std::fs::read_dir(&d).unwrap() {
                let p = e.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    let rel = p.strip_prefix(dir).unwrap().display().to_string();
                    out.push((rel, std::fs::read(&p).unwrap()));
                }
            }
        }
        out.sort();
        out
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        generate_synthetic_dataset(&small(), 7).unwrap().write_to(a.path()).unwrap();
        generate_synthetic_dataset(&small(), 7).unwrap().write_to(b.path()).unwrap();
        let ta = read_tree(a.path());
        assert_eq!(ta.len(), 2 + 10);
        assert_eq!(ta, read_tree(b.path()));
    }

    #[test]
    fn noiseless_moment_equals_signature() {
        let cfg = SynthConfig {
            sigma: 0.0,
            ..small()
        };
        let ds = generate_synthetic_dataset(&cfg, 3).unwrap();
        for v in &ds.videos {
            for j in v.clips.0..v.clips.1 {
                assert_eq!(v.features.row(j), v.signature.as_slice());
            }
        }
    }

    #[test]
    fn requested_record_count() {
        let cfg = SynthConfig {
            n_train: 400,
            n_test: 100,
            ..SynthConfig::default()
        };
        let ds = generate_synthetic_dataset(&cfg, 1).unwrap();
        assert_eq!(ds.manifest.len(), 500);
        assert_eq!(ds.manifest.eval_records().unwrap().len(), 100);
    }

    #[test]
    fn infeasible_moment_is_rejected() {
        let cfg = SynthConfig {
            moment_frac: (0.5, 1.5),
            ..small()
        };
        assert!(matches!(
            generate_synthetic_dataset(&cfg, 1),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn written_corpus_loads_back() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_synthetic_dataset(&small(), 5).unwrap();
        ds.write_to(dir.path()).unwrap();
        let m = load_manifest(&dir.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(m, ds.manifest);
        let v = build_vocab(&m, 50).unwrap();
        assert!(v.len() <= 50);
        for r in m.eval_records().unwrap() {
            assert!(r.1.end() <= r.0.duration);
        }
    }

    fn mean_rows(f: &FeatureMatrix, rows: impl Iterator<Item = usize>) -> Vec<f64> {
        let mut sum = vec![0.0; f.cols];
        let mut n = 0.0;
        for j in rows {
            for (s, x) in sum.iter_mut().zip(f.row(j)) {
                *s += *x as f64;
            }
            n += 1.0;
        }
        sum.iter().map(|s| s / n).collect()
    }

    fn cosine(a: &[f64], b: &[f32]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * *y as f64).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|y| (*y as f64).powi(2)).sum::<f64>().sqrt();
        dot / (na * nb)
    }

    #[test]
    fn moment_clips_resemble_signature() {
        let cfg = SynthConfig {
            n_train: 50,
            n_test: 0,
            ..SynthConfig::default()
        };
        let ds = generate_synthetic_dataset(&cfg, 7).unwrap();
        let mut wins = 0;
        for v in &ds.videos {
            let (s, e) = v.clips;
            let inside = mean_rows(&v.features, s..e);
            let outside = mean_rows(&v.features, (0..cfg.n_clips).filter(|j| *j < s || *j >= e));
            if cosine(&inside, &v.signature) > cosine(&outside, &v.signature) {
                wins += 1;
            }
        }
        assert_eq!(wins, ds.videos.len());
    }
}
