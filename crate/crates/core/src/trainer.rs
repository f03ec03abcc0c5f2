//! Alternating two-phase training.
//!
//! Every batch first steps the reconstructor on the reconstruction loss with
//! the generator output detached, then recomputes everything and steps the
//! generator on the contrastive loss.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::data::{ClipFeatureSequence, EmbeddingTable, TokenizedQuery};
use crate::dataset::{query_input, video_tensor, PreparedDataset};
use crate::error::{Error, Result};
use crate::inference::evaluate;
use crate::model::reconstructor::sequence_ce;
use crate::model::{
    mask_inverse_query, mask_query, reverse_query, MaskGenerator, MaskedQuery, MaskedQueryBatch,
    Reconstructor,
};
use crate::objectives::{CeTensors, LossBundle, Margins, StreamCe};

/// Name of the per-epoch loss log inside the output directory.
pub const METRICS_FILE: &str = "metrics.jsonl";
/// Thresholds reported during and after training.
pub const EVAL_THRESHOLDS: [f64; 3] = [0.3, 0.5, 0.7];

pub fn checkpoint_path(out_dir: &Path, epoch: usize) -> PathBuf {
    out_dir.join(format!("epoch_{epoch:03}.ckpt"))
}

/// Losses of both phases of one step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    /// Measured before the reconstructor update.
    pub phase_a: LossBundle,
    /// Measured before the generator update.
    pub phase_b: LossBundle,
}

/// One batch of (video, query) pairs.
pub struct Batch<'a> {
    pub videos: Vec<&'a ClipFeatureSequence>,
    pub queries: Vec<&'a TokenizedQuery>,
}

/// Tensors shared by the two phases of a step.
pub(crate) struct StepInputs {
    video: Tensor,
    positive: Tensor,
    fwd_masked: MaskedQueryBatch,
    inv_masked: Option<MaskedQueryBatch>,
}

/// Both models, their optimizers and the masking RNG.
pub struct Trainer {
    pub config: TrainConfig,
    pub generator: MaskGenerator,
    pub reconstructor: Reconstructor,
    gen_vars: Vec<Var>,
    rec_vars: Vec<Var>,
    gen_opt: AdamW,
    rec_opt: AdamW,
    margins: Margins,
    rng: ChaCha8Rng,
    table: EmbeddingTable,
    dtype: DType,
    device: Device,
}

fn adam(vars: Vec<Var>, lr: f64) -> Result<AdamW> {
    let params = ParamsAdamW {
        lr,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
        weight_decay: 0.0,
    };
    Ok(AdamW::new(vars, params)?)
}

/// Rescales gradients of `vars` so that their global L2 norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut GradStore, vars: &[Var], max_norm: f64) -> Result<f64> {
    let mut sq = 0.0;
    for v in vars {
        if let Some(g) = grads.get(v) {
            sq += g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        }
    }
    let norm = sq.sqrt();
    if !norm.is_finite() {
        return Err(Error::NonFiniteLoss("gradient norm".into()));
    }
    if norm > max_norm {
        let scale = max_norm / (norm + 1e-12);
        for v in vars {
            if let Some(g) = grads.get(v) {
                let scaled = (g * scale)?;
                grads.insert(v, scaled);
            }
        }
    }
    Ok(norm)
}

impl Trainer {
    pub fn new(config: TrainConfig, table: EmbeddingTable, dtype: DType, device: &Device) -> Result<Self> {
        let config = config.validated()?;
        if table.dim() != config.d_w {
            return Err(Error::Config(format!(
                "embedding width {} differs from d_w = {}",
                table.dim(),
                config.d_w
            )));
        }
        let generator = MaskGenerator::new(&config, dtype, device)?;
        let reconstructor = Reconstructor::new(&config, dtype, device)?;
        let gen_vars = generator.store().vars();
        let rec_vars = reconstructor.store().vars();
        Ok(Self {
            gen_opt: adam(gen_vars.clone(), config.learning_rate)?,
            rec_opt: adam(rec_vars.clone(), config.learning_rate)?,
            gen_vars,
            rec_vars,
            margins: Margins::from_config(&config),
            rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0x6d61_736b),
            generator,
            reconstructor,
            config,
            table,
            dtype,
            device: device.clone(),
        })
    }

    pub fn table(&self) -> &EmbeddingTable {
        &self.table
    }

    /// CE tensors of the reconstructor under a `[B, n_v]` positive mask
    /// and its mined negatives.
    fn ce_terms(
        &self,
        video: &Tensor,
        positive: &Tensor,
        fwd_masked: &MaskedQueryBatch,
        inv_masked: Option<&MaskedQueryBatch>,
    ) -> Result<CeTensors> {
        let b = video.dims3()?.0;
        let easy = positive.affine(-1.0, 1.0)?;
        let hard = positive.ones_like()?;
        let masks = Tensor::cat(&[positive, &easy, &hard], 0)?;
        let videos = Tensor::cat(&[video, video, video], 0)?;
        let encoded = self.reconstructor.masked_encode(&videos, &masks)?;
        let fq = MaskedQueryBatch::cat(&[fwd_masked, fwd_masked, fwd_masked])?;
        let (queries, encoded, masks) = match inv_masked {
            Some(im) => {
                let iq = MaskedQueryBatch::cat(&[im, im, im])?;
                (
                    MaskedQueryBatch::cat(&[&fq, &iq])?,
                    Tensor::cat(&[&encoded, &encoded], 0)?,
                    Tensor::cat(&[&masks, &masks], 0)?,
                )
            }
            None => (fq, encoded, masks),
        };
        let hidden = self.reconstructor.masked_decode(&queries, &encoded, &masks)?;
        let ce = sequence_ce(&self.reconstructor.word_logits(&hidden)?, &queries)?;
        let part = |i: usize| ce.narrow(0, i * b, b);
        let forward = StreamCe {
            pos: part(0)?,
            easy: part(1)?,
            hard: part(2)?,
        };
        let inverse = match inv_masked {
            Some(_) => Some(StreamCe {
                pos: part(3)?,
                easy: part(4)?,
                hard: part(5)?,
            }),
            None => None,
        };
        Ok(CeTensors { forward, inverse })
    }

    /// Draws masked forward and inverse queries for a batch.
    pub fn mask_batch(&mut self, queries: &[&TokenizedQuery]) -> Result<(Vec<MaskedQuery>, Vec<MaskedQuery>)> {
        let mut fwd = Vec::with_capacity(queries.len());
        let mut inv = Vec::with_capacity(queries.len());
        for q in queries {
            fwd.push(mask_query(q, &mut self.rng)?);
            if self.config.mt_enabled {
                inv.push(mask_inverse_query(q, &mut self.rng)?);
            }
        }
        Ok((fwd, inv))
    }

    /// Masks the batch and runs the generator once. The generator does not
    /// change during phase A, so both phases share this forward pass.
    pub(crate) fn prepare(&mut self, batch: &Batch<'_>) -> Result<StepInputs> {
        if batch.videos.len() != batch.queries.len() || batch.videos.is_empty() {
            return Err(Error::InvalidArgument("batch needs matching, non-empty videos and queries".into()));
        }
        let (fwd_m, inv_m) = self.mask_batch(&batch.queries)?;
        let video = video_tensor(&batch.videos, self.dtype, &self.device)?;
        let fwd = query_input(&batch.queries, self.dtype, &self.device)?;
        let reversed: Vec<TokenizedQuery> = batch.queries.iter().map(|q| reverse_query(q)).collect();
        let inv = if self.config.mt_enabled {
            Some(query_input(&reversed.iter().collect::<Vec<_>>(), self.dtype, &self.device)?)
        } else {
            None
        };
        let fwd_masked = MaskedQueryBatch::new(&fwd_m.iter().collect::<Vec<_>>(), &self.table, self.dtype, &self.device)?;
        let inv_masked = if self.config.mt_enabled {
            Some(MaskedQueryBatch::new(&inv_m.iter().collect::<Vec<_>>(), &self.table, self.dtype, &self.device)?)
        } else {
            None
        };
        let positive = self.generator.forward(&video, &fwd, inv.as_ref())?.positive;
        Ok(StepInputs {
            video,
            positive,
            fwd_masked,
            inv_masked,
        })
    }

    /// Steps the reconstructor on the reconstruction loss.
    pub(crate) fn phase_a(&mut self, x: &StepInputs) -> Result<LossBundle> {
        let ce = self.ce_terms(&x.video, &x.positive.detach(), &x.fwd_masked, x.inv_masked.as_ref())?;
        let bundle = ce.bundle(&self.margins)?;
        let mut grads = ce.rec_loss()?.backward()?;
        clip_grad_norm(&mut grads, &self.rec_vars, self.config.grad_clip)?;
        self.rec_opt.step(&grads)?;
        Ok(bundle)
    }

    /// Steps the generator on the contrastive loss.
    pub(crate) fn phase_b(&mut self, x: &StepInputs) -> Result<LossBundle> {
        let ce = self.ce_terms(&x.video, &x.positive, &x.fwd_masked, x.inv_masked.as_ref())?;
        let bundle = ce.bundle(&self.margins)?;
        let mut grads = ce.ivc_loss(&self.margins)?.backward()?;
        clip_grad_norm(&mut grads, &self.gen_vars, self.config.grad_clip)?;
        self.gen_opt.step(&grads)?;
        Ok(bundle)
    }

    /// Phase A then phase B on one batch.
    pub fn train_step(&mut self, batch: &Batch<'_>) -> Result<StepLosses> {
        let inputs = self.prepare(batch)?;
        let phase_a = self.phase_a(&inputs)?;
        let phase_b = self.phase_b(&inputs)?;
        Ok(StepLosses { phase_a, phase_b })
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    /// Epoch means of the phase-A reconstruction loss and phase-B
    /// contrastive loss; `None` for the initial checkpoint.
    pub l_rec: Option<f64>,
    pub l_ivc: Option<f64>,
    pub ce_f_pos: Option<f64>,
    pub ce_f_hard: Option<f64>,
    pub ce_f_easy: Option<f64>,
    /// `(threshold, Rank@1 %)` on the evaluation split, when it has one.
    pub rank1: Vec<(f64, f64)>,
    pub miou: Option<f64>,
}

pub struct TrainOutcome {
    pub trainer: Trainer,
    pub history: Vec<EpochRecord>,
    pub checkpoints: Vec<PathBuf>,
}

fn eval_record(trainer: &Trainer, data: &PreparedDataset, epoch: usize) -> Result<EpochRecord> {
    let mut rec = EpochRecord {
        epoch,
        steps: 0,
        l_rec: None,
        l_ivc: None,
        ce_f_pos: None,
        ce_f_hard: None,
        ce_f_easy: None,
        rank1: Vec::new(),
        miou: None,
    };
    if !data.eval.is_empty() && data.eval.iter().all(|e| e.ground_truth.is_some()) {
        let (report, _) = evaluate(&trainer.generator, &trainer.config, data, &data.eval, &EVAL_THRESHOLDS)?;
        rec.rank1 = report.rank1;
        rec.miou = Some(report.miou);
    }
    Ok(rec)
}

/// Trains for `config.epochs` epochs, writing `epoch_000.ckpt` (the
/// initial parameters) through `epoch_NNN.ckpt` and `metrics.jsonl` into
/// `out_dir`.
pub fn train(config: &TrainConfig, data: &PreparedDataset, out_dir: &Path) -> Result<TrainOutcome> {
    let config = config.clone().validated()?;
    if data.train.is_empty() {
        return Err(Error::InvalidArgument("the training split is empty".into()));
    }
    if let Some(v) = data.videos.first() {
        if v.dim() != config.d_v || v.n_clips() != config.n_v {
            return Err(Error::Config(format!(
                "videos are {}x{}, configuration expects n_v = {}, d_v = {}",
                v.n_clips(),
                v.dim(),
                config.n_v,
                config.d_v
            )));
        }
    }
    fs::create_dir_all(out_dir)?;
    let mut log_file = fs::File::create(out_dir.join(METRICS_FILE))?;
    let mut trainer = Trainer::new(config.clone(), data.table.clone(), DType::F32, &Device::Cpu)?;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut history = Vec::new();
    let mut checkpoints = Vec::new();

    let save = |trainer: &Trainer, epoch: usize, checkpoints: &mut Vec<PathBuf>| -> Result<()> {
        let path = checkpoint_path(out_dir, epoch);
        Checkpoint::capture(&trainer.config, &data.vocab, &data.table, epoch, &trainer.generator, &trainer.reconstructor)?
            .write(&path)?;
        checkpoints.push(path);
        Ok(())
    };

    let initial = eval_record(&trainer, data, 0)?;
    writeln!(log_file, "{}", serde_json::to_string(&initial)?)?;
    history.push(initial);
    save(&trainer, 0, &mut checkpoints)?;

    let mut order: Vec<usize> = (0..data.train.len()).collect();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut sums = [0.0f64; 5];
        let mut steps = 0;
        for chunk in order.chunks(config.batch_size) {
            let batch = Batch {
                videos: chunk.iter().map(|&i| &data.videos[data.train[i].video]).collect(),
                queries: chunk.iter().map(|&i| &data.train[i].query).collect(),
            };
            let s = trainer.train_step(&batch)?;
            for (acc, v) in sums.iter_mut().zip([
                s.phase_a.l_rec,
                s.phase_b.l_ivc,
                s.phase_a.ce_f_pos,
                s.phase_a.ce_f_hard,
                s.phase_a.ce_f_easy,
            ]) {
                *acc += v;
            }
            steps += 1;
        }
        let mean = |i: usize| Some(sums[i] / steps as f64);
        let mut rec = eval_record(&trainer, data, epoch)?;
        rec.steps = steps;
        rec.l_rec = mean(0);
        rec.l_ivc = mean(1);
        rec.ce_f_pos = mean(2);
        rec.ce_f_hard = mean(3);
        rec.ce_f_easy = mean(4);
        log::info!(
            "epoch {epoch}: l_rec {:.4} l_ivc {:.4} R@1(0.5) {:?}",
            sums[0] / steps as f64,
            sums[1] / steps as f64,
            rec.rank1.iter().find(|r| r.0 == 0.5).map(|r| r.1)
        );
        writeln!(log_file, "{}", serde_json::to_string(&rec)?)?;
        log_file.flush()?;
        history.push(rec);
        save(&trainer, epoch, &mut checkpoints)?;
    }
    Ok(TrainOutcome {
        trainer,
        history,
        checkpoints,
    })
}

/// Reads a metrics log back.
pub fn read_metrics(path: &Path) -> Result<Vec<EpochRecord>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}
