//! Proposal ranking, vote-based top-1 selection and moment retrieval.

use std::cmp::Ordering;
use std::io::Write;
use std::path::Path;

use candle_core::{DType, Device};
use serde::{Deserialize, Serialize};

use crate::config::{Strategy, TrainConfig};
use crate::data::{tokenize, ClipFeatureSequence, EmbeddingTable, Vocab};
use crate::dataset::{query_input, video_tensor, Example, PreparedDataset};
use crate::metrics::EvalReport;
use crate::error::{Error, Result};
use crate::model::{reverse_query, MaskGenerator};
use crate::types::{iou, proposal_to_moment, Moment, Proposal, ProposalSet};

/// Vote masses closer than this count as tied.
pub const VOTE_TIE_EPS: f64 = 1e-12;

fn score_of(p: &Proposal) -> f64 {
    p.score.unwrap_or(f64::NEG_INFINITY)
}

/// Proposals sorted by descending score; equal scores keep their order.
pub fn rank_by_attention(proposals: &ProposalSet) -> Result<ProposalSet> {
    if proposals.iter().any(|p| p.score.is_none()) {
        return Err(Error::InvalidArgument("attention ranking needs scored proposals".into()));
    }
    let mut sorted = proposals.as_slice().to_vec();
    sorted.sort_by(|a, b| score_of(b).total_cmp(&score_of(a)));
    ProposalSet::new(sorted)
}

/// Vote received by each proposal from all others: summed IoU of unit
/// intervals, or with a threshold the number of IoUs above it.
pub fn vote_masses(proposals: &ProposalSet, threshold: Option<f64>) -> Vec<f64> {
    let intervals: Vec<Moment> = proposals.iter().map(Proposal::unit_interval).collect();
    (0..intervals.len())
        .map(|i| {
            (0..intervals.len())
                .filter(|&j| j != i)
                .map(|j| {
                    let v = iou(&intervals[i], &intervals[j]);
                    match threshold {
                        Some(t) => (v > t) as u8 as f64,
                        None => v,
                    }
                })
                .sum()
        })
        .collect()
}

/// Highest vote first, then higher score, then lower index.
fn vote_order(proposals: &ProposalSet, threshold: Option<f64>) -> Vec<usize> {
    let votes = vote_masses(proposals, threshold);
    let ps = proposals.as_slice();
    let mut order: Vec<usize> = (0..ps.len()).collect();
    order.sort_by(|&a, &b| {
        let by_vote = if (votes[a] - votes[b]).abs() <= VOTE_TIE_EPS {
            Ordering::Equal
        } else {
            votes[b].total_cmp(&votes[a])
        };
        by_vote
            .then_with(|| score_of(&ps[b]).total_cmp(&score_of(&ps[a])))
            .then(a.cmp(&b))
    });
    order
}

/// Index of the winning proposal.
pub fn vote_winner(proposals: &ProposalSet, threshold: Option<f64>) -> usize {
    vote_order(proposals, threshold)[0]
}

pub fn vote_top1(proposals: &ProposalSet) -> Proposal {
    proposals.as_slice()[vote_winner(proposals, None)]
}

/// All proposals ordered by vote mass.
pub fn rank_by_vote(proposals: &ProposalSet, threshold: Option<f64>) -> ProposalSet {
    let ps = proposals.as_slice();
    let ranked = vote_order(proposals, threshold).into_iter().map(|i| ps[i]).collect();
    ProposalSet::new(ranked).expect("reordering keeps a valid set")
}

/// Orders proposals according to `strategy`, best first.
pub fn rank(proposals: &ProposalSet, strategy: Strategy, threshold: Option<f64>) -> Result<ProposalSet> {
    match strategy {
        Strategy::Vote => Ok(rank_by_vote(proposals, threshold)),
        Strategy::AttentionScore => rank_by_attention(proposals),
    }
}

/// Result of one query.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Retrieval {
    pub moment: Moment,
    /// Every proposal as a moment, best first.
    pub ranked: Vec<Moment>,
    pub proposals: ProposalSet,
}

/// A generator with the vocabulary and embeddings it was trained with.
pub struct Retriever {
    pub config: TrainConfig,
    pub generator: MaskGenerator,
    pub vocab: Vocab,
    pub table: EmbeddingTable,
}

impl Retriever {
    pub fn new(config: TrainConfig, generator: MaskGenerator, vocab: Vocab, table: EmbeddingTable) -> Self {
        Self {
            config,
            generator,
            vocab,
            table,
        }
    }

    pub fn retrieve_batch(&self, items: &[(&ClipFeatureSequence, &str)]) -> Result<Vec<Retrieval>> {
        retrieve_batch(&self.generator, &self.config, &self.vocab, &self.table, items)
    }

    pub fn retrieve(&self, video: &ClipFeatureSequence, query: &str) -> Result<Retrieval> {
        Ok(self.retrieve_batch(&[(video, query)])?.remove(0))
    }
}

/// Raw proposal sets for a batch of (video, query text) pairs.
pub fn batch_proposals(
    generator: &MaskGenerator,
    cfg: &TrainConfig,
    vocab: &Vocab,
    table: &EmbeddingTable,
    items: &[(&ClipFeatureSequence, &str)],
) -> Result<Vec<ProposalSet>> {
    let device = generator.store().device().clone();
    let dtype = generator.store().dtype();
    let mut out = Vec::with_capacity(items.len());
    for chunk in items.chunks(cfg.batch_size.max(1)) {
        let videos: Vec<&ClipFeatureSequence> = chunk.iter().map(|i| i.0).collect();
        let fwd: Vec<_> = chunk.iter().map(|i| tokenize(i.1, vocab, cfg.n_q, table)).collect();
        if let Some(i) = fwd.iter().position(|q| q.valid_len == 0) {
            return Err(Error::InvalidArgument(format!("query `{}` has no known tokens", chunk[i].1)));
        }
        let inv: Vec<_> = fwd.iter().map(reverse_query).collect();
        let v = video_tensor(&videos, dtype, &device)?;
        let f = query_input(&fwd.iter().collect::<Vec<_>>(), dtype, &device)?;
        let i = query_input(&inv.iter().collect::<Vec<_>>(), dtype, &device)?;
        let g = generator.forward(&v, &f, cfg.mt_enabled.then_some(&i))?;
        for b in 0..chunk.len() {
            out.push(g.proposals(b, cfg.width_cap)?);
        }
    }
    Ok(out)
}

/// Proposals, ranking and second-level moments for a batch of queries.
pub fn retrieve_batch(
    generator: &MaskGenerator,
    cfg: &TrainConfig,
    vocab: &Vocab,
    table: &EmbeddingTable,
    items: &[(&ClipFeatureSequence, &str)],
) -> Result<Vec<Retrieval>> {
    let sets = batch_proposals(generator, cfg, vocab, table, items)?;
    items
        .iter()
        .zip(sets)
        .map(|((video, _), set)| {
            let ranked = rank(&set, cfg.inference_strategy, cfg.vote_threshold)?;
            let moments = ranked
                .iter()
                .map(|p| proposal_to_moment(p, video.duration))
                .collect::<Result<Vec<_>>>()?;
            Ok(Retrieval {
                moment: moments[0],
                ranked: moments,
                proposals: set,
            })
        })
        .collect()
}

/// Scores the generator on `examples`, which must all carry ground truth.
pub fn evaluate(
    generator: &MaskGenerator,
    cfg: &TrainConfig,
    data: &PreparedDataset,
    examples: &[Example],
    thresholds: &[f64],
) -> Result<(EvalReport, Vec<PredictionRecord>)> {
    let mut gts = Vec::with_capacity(examples.len());
    for e in examples {
        gts.push(e.ground_truth.ok_or_else(|| {
            Error::InvalidArgument(format!("evaluation query `{}` has no ground truth", e.text))
        })?);
    }
    let items: Vec<(&ClipFeatureSequence, &str)> = examples
        .iter()
        .map(|e| (&data.videos[e.video], e.text.as_str()))
        .collect();
    let results = retrieve_batch(generator, cfg, &data.vocab, &data.table, &items)?;
    let preds: Vec<Moment> = results.iter().map(|r| r.moment).collect();
    let report = EvalReport::compute(&preds, &gts, thresholds, &cfg.inference_strategy.to_string())?;
    let records = examples
        .iter()
        .zip(&preds)
        .map(|(e, m)| PredictionRecord {
            video_id: data.videos[e.video].video_id.clone(),
            query: e.text.clone(),
            start: m.start(),
            end: m.end(),
            strategy: cfg.inference_strategy,
            k: cfg.k,
        })
        .collect();
    Ok((report, records))
}

/// Per-clip curves of every proposal mask for one query.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskCurves {
    /// `k` rows of `n_v` values.
    pub masks: Vec<Vec<f64>>,
    pub positive: Vec<f64>,
    pub easy: Vec<f64>,
    pub beta: Vec<f64>,
}

impl MaskCurves {
    /// Tab-separated columns `clip, mask_0.., positive, easy`, one row per
    /// clip, followed by a `beta` row with the aggregation weights.
    pub fn to_columns(&self) -> String {
        let mut out = String::from("clip");
        for i in 0..self.masks.len() {
            out.push_str(&format!("\tmask_{i}"));
        }
        out.push_str("\tpositive\teasy\n");
        for j in 0..self.positive.len() {
            out.push_str(&j.to_string());
            for m in &self.masks {
                out.push_str(&format!("\t{:.6}", m[j]));
            }
            out.push_str(&format!("\t{:.6}\t{:.6}\n", self.positive[j], self.easy[j]));
        }
        out.push_str("beta");
        for b in &self.beta {
            out.push_str(&format!("\t{b:.6}"));
        }
        out.push('\n');
        out
    }
}

pub fn mask_curves(
    generator: &MaskGenerator,
    cfg: &TrainConfig,
    vocab: &Vocab,
    table: &EmbeddingTable,
    video: &ClipFeatureSequence,
    query: &str,
) -> Result<MaskCurves> {
    let device = generator.store().device().clone();
    let dtype = generator.store().dtype();
    let fwd = tokenize(query, vocab, cfg.n_q, table);
    if fwd.valid_len == 0 {
        return Err(Error::InvalidArgument(format!("query `{query}` has no known tokens")));
    }
    let inv = reverse_query(&fwd);
    let v = video_tensor(&[video], dtype, &device)?;
    let f = query_input(&[&fwd], dtype, &device)?;
    let i = query_input(&[&inv], dtype, &device)?;
    let g = generator.forward(&v, &f, cfg.mt_enabled.then_some(&i))?;
    let to64 = |t: &candle_core::Tensor| -> Result<Vec<f64>> {
        Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
    };
    let flat = to64(&g.masks)?;
    let masks = flat.chunks(cfg.n_v).map(|c| c.to_vec()).collect();
    let triplet = crate::model::mine_negatives(&to64(&g.positive)?);
    Ok(MaskCurves {
        masks,
        positive: triplet.positive,
        easy: triplet.easy,
        beta: to64(&g.agg_beta)?,
    })
}

/// Loads a checkpoint for inference on the CPU.
pub fn load_retriever(path: &Path) -> Result<Retriever> {
    let ck = crate::checkpoint::Checkpoint::read(path)?;
    let generator = ck.restore_generator(DType::F32, &Device::Cpu)?;
    Ok(Retriever::new(ck.config, generator, ck.vocab, ck.table))
}

/// One line of the prediction dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub video_id: String,
    pub query: String,
    pub start: f64,
    pub end: f64,
    pub strategy: Strategy,
    pub k: usize,
}

pub fn write_predictions(path: &Path, records: &[PredictionRecord]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn set(cw: &[(f64, f64)], scores: Option<&[f64]>) -> ProposalSet {
        ProposalSet::new(
            cw.iter()
                .enumerate()
                .map(|(i, &(c, w))| {
                    let p = Proposal::new(c, w, 1.0).unwrap();
                    match scores {
                        Some(s) => p.with_score(s[i]),
                        None => p,
                    }
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn attention_ranking() {
        let s = set(&[(0.1, 0.1), (0.5, 0.1), (0.9, 0.1)], Some(&[0.2, 0.5, 0.3]));
        let r = rank_by_attention(&s).unwrap();
        let centers: Vec<f64> = r.iter().map(|p| p.center).collect();
        assert_eq!(centers, vec![0.5, 0.9, 0.1]);
        let tied = set(&[(0.1, 0.1), (0.5, 0.1), (0.9, 0.1)], Some(&[0.4, 0.4, 0.4]));
        assert_eq!(rank_by_attention(&tied).unwrap(), tied);
        let single = set(&[(0.3, 0.2)], Some(&[1.0]));
        assert_eq!(rank_by_attention(&single).unwrap(), single);
        assert!(rank_by_attention(&set(&[(0.3, 0.2)], None)).is_err());
    }

    #[test]
    fn worked_vote_example() {
        let s = set(&[(0.5, 0.2), (0.55, 0.2), (0.6, 0.2)], None);
        let v = vote_masses(&s, None);
        assert!((v[0] - 0.6 - 1.0 / 3.0).abs() < 1e-9);
        assert!((v[1] - 1.2).abs() < 1e-9);
        assert!((v[2] - 0.6 - 1.0 / 3.0).abs() < 1e-9);
        assert_eq!(vote_winner(&s, None), 1);
        assert_eq!(vote_top1(&s).center, 0.55);
        let order: Vec<f64> = rank_by_vote(&s, None).iter().map(|p| p.center).collect();
        assert_eq!(order, vec![0.55, 0.5, 0.6]);
    }

    #[test]
    fn vote_ties() {
        let one = set(&[(0.3, 0.2)], None);
        assert_eq!(vote_top1(&one), one.as_slice()[0]);
        let same = set(&[(0.3, 0.2); 4], Some(&[0.25; 4]));
        assert_eq!(vote_winner(&same, None), 0);
        let scored = set(&[(0.3, 0.2); 3], Some(&[0.2, 0.5, 0.3]));
        assert_eq!(vote_winner(&scored, None), 1);
    }

    #[test]
    fn thresholded_votes_count_overlaps() {
        let s = set(&[(0.5, 0.2), (0.55, 0.2), (0.6, 0.2)], None);
        assert_eq!(vote_masses(&s, Some(0.5)), vec![1.0, 2.0, 1.0]);
        assert_eq!(vote_winner(&s, Some(0.5)), 1);
    }

    #[test]
    fn single_proposal_strategies_agree() {
        let s = set(&[(0.42, 0.3)], Some(&[1.0]));
        assert_eq!(
            rank(&s, crate::config::Strategy::Vote, None).unwrap(),
            rank(&s, crate::config::Strategy::AttentionScore, None).unwrap()
        );
    }

    proptest! {
        #[test]
        fn votes_are_permutation_equivariant(cw in proptest::collection::vec((0.0f64..=1.0, 0.01f64..=1.0), 1..7), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let scores: Vec<f64> = (0..cw.len()).map(|i| i as f64 / 10.0).collect();
            let s = set(&cw, Some(&scores));
            let mut perm: Vec<usize> = (0..cw.len()).collect();
            perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let pcw: Vec<_> = perm.iter().map(|&i| cw[i]).collect();
            let ps: Vec<_> = perm.iter().map(|&i| scores[i]).collect();
            let p = set(&pcw, Some(&ps));
            let v = vote_masses(&s, None);
            let pv = vote_masses(&p, None);
            for (k, &i) in perm.iter().enumerate() {
                prop_assert!((pv[k] - v[i]).abs() < 1e-12);
            }
            prop_assert_eq!(vote_top1(&s), vote_top1(&p));
        }
    }
}
