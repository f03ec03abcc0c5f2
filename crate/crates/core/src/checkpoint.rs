//! Named-section binary checkpoints.
//!
//! Layout: `MCCK | version u32 | meta_len u32 | meta JSON | n u32`, then `n`
//! sections of `name_len u32 | name | ndim u32 | dims u32... | matrix block`
//! where the matrix block uses the clip-feature encoding. All integers are
//! little-endian.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::data::{decode_features, encode_features, EmbeddingTable, FeatureMatrix, Vocab};
use crate::error::{Error, Result};
use crate::model::{MaskGenerator, ParamStore, Reconstructor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MCCK";
pub const CHECKPOINT_VERSION: u32 = 1;
const EMBEDDING_SECTION: &str = "word_embeddings";

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Meta {
    config: TrainConfig,
    fingerprint: String,
    vocab: Vec<String>,
    epoch: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Section {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

/// Everything needed to rebuild a trained model.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub fingerprint: String,
    pub vocab: Vocab,
    pub table: EmbeddingTable,
    pub epoch: usize,
    pub sections: Vec<Section>,
}

fn store_sections(store: &ParamStore) -> Result<Vec<Section>> {
    store
        .named()
        .map(|(name, var)| {
            let data = var.as_tensor().flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
            Ok(Section {
                name: name.to_string(),
                dims: var.dims().to_vec(),
                data,
            })
        })
        .collect()
}

impl Checkpoint {
    pub fn capture(
        config: &TrainConfig,
        vocab: &Vocab,
        table: &EmbeddingTable,
        epoch: usize,
        generator: &MaskGenerator,
        reconstructor: &Reconstructor,
    ) -> Result<Self> {
        let mut sections = store_sections(generator.store())?;
        sections.extend(store_sections(reconstructor.store())?);
        Ok(Self {
            config: config.clone(),
            fingerprint: config.fingerprint(),
            vocab: vocab.clone(),
            table: table.clone(),
            epoch,
            sections,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let meta = serde_json::to_vec(&Meta {
            config: self.config.clone(),
            fingerprint: self.fingerprint.clone(),
            vocab: self.vocab.word_tokens().to_vec(),
            epoch: self.epoch,
        })?;
        let mut w = BufWriter::new(fs::File::create(path)?);
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(meta.len() as u32).to_le_bytes())?;
        w.write_all(&meta)?;
        let table = Section {
            name: EMBEDDING_SECTION.into(),
            dims: vec![self.table.len(), self.table.dim()],
            data: self.table.as_slice().to_vec(),
        };
        let all: Vec<&Section> = self.sections.iter().chain(std::iter::once(&table)).collect();
        w.write_all(&(all.len() as u32).to_le_bytes())?;
        for s in all {
            w.write_all(&(s.name.len() as u32).to_le_bytes())?;
            w.write_all(s.name.as_bytes())?;
            w.write_all(&(s.dims.len() as u32).to_le_bytes())?;
            for d in &s.dims {
                w.write_all(&(*d as u32).to_le_bytes())?;
            }
            let cols = s.dims.last().copied().unwrap_or(1).max(1);
            let m = FeatureMatrix::new(s.data.len() / cols, cols, s.data.clone())?;
            encode_features(&m, &mut w)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = match fs::read(path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(Error::MissingFile(path.to_path_buf()))
            }
            Err(e) => return Err(e.into()),
        };
        let mut r = Reader { bytes: &bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint(format!("{}: not a checkpoint file", path.display())));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let meta_len = r.u32()? as usize;
        let meta: Meta = serde_json::from_slice(r.take(meta_len)?)?;
        let n = r.u32()? as usize;
        let mut sections = Vec::with_capacity(n);
        let mut table = None;
        for _ in 0..n {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Checkpoint("section name is not UTF-8".into()))?;
            let ndim = r.u32()? as usize;
            let dims = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let (m, used) = decode_features(&r.bytes[r.pos..])
                .map_err(|e| Error::Checkpoint(format!("section `{name}`: {e}")))?;
            r.pos += used;
            if m.data.len() != dims.iter().product::<usize>() {
                return Err(Error::Checkpoint(format!("section `{name}` size disagrees with {dims:?}")));
            }
            if name == EMBEDDING_SECTION {
                table = Some(EmbeddingTable::from_rows(m.cols, m.data)?);
            } else {
                sections.push(Section { name, dims, data: m.data });
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let table = table.ok_or_else(|| Error::Checkpoint("missing word embeddings".into()))?;
        let config = meta.config.validated()?;
        if config.fingerprint() != meta.fingerprint {
            return Err(Error::FingerprintMismatch {
                expected: config.fingerprint(),
                found: meta.fingerprint,
            });
        }
        Ok(Self {
            config,
            fingerprint: meta.fingerprint,
            vocab: Vocab::from_tokens(meta.vocab)?,
            table,
            epoch: meta.epoch,
            sections,
        })
    }

    /// Rejects the checkpoint unless it was produced for `config`'s architecture.
    pub fn check_compatible(&self, config: &TrainConfig) -> Result<()> {
        let expected = config.fingerprint();
        if expected != self.fingerprint {
            return Err(Error::FingerprintMismatch {
                expected,
                found: self.fingerprint.clone(),
            });
        }
        Ok(())
    }

    fn load_into(&self, store: &ParamStore) -> Result<()> {
        let mut seen = 0;
        for s in &self.sections {
            if store.get(&s.name).is_some() {
                let t = Tensor::from_vec(s.data.clone(), s.dims.as_slice(), store.device())?;
                store.set(&s.name, &t)?;
                seen += 1;
            }
        }
        let expected = store.named().count();
        if seen != expected {
            return Err(Error::Checkpoint(format!(
                "checkpoint covers {seen} of {expected} parameters"
            )));
        }
        Ok(())
    }

    /// Builds both models with this checkpoint's parameters.
    pub fn restore(&self, dtype: DType, device: &Device) -> Result<(MaskGenerator, Reconstructor)> {
        let generator = MaskGenerator::new(&self.config, dtype, device)?;
        let reconstructor = Reconstructor::new(&self.config, dtype, device)?;
        self.load_into(generator.store())?;
        self.load_into(reconstructor.store())?;
        Ok((generator, reconstructor))
    }

    /// Builds only the generator, which is all inference needs.
    pub fn restore_generator(&self, dtype: DType, device: &Device) -> Result<MaskGenerator> {
        let generator = MaskGenerator::new(&self.config, dtype, device)?;
        self.load_into(generator.store())?;
        Ok(generator)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> (TrainConfig, Vocab, EmbeddingTable) {
        let cfg = TrainConfig {
            n_v: 6,
            n_q: 4,
            d_v: 3,
            d_w: 4,
            d_h: 8,
            heads: 2,
            layers: 1,
            vocab_size: 10,
            ..TrainConfig::default()
        };
        let vocab = Vocab::from_tokens(["walk", "door", "the"]).unwrap();
        let table = EmbeddingTable::random(&vocab, cfg.d_w, 5);
        (cfg, vocab, table)
    }

    #[test]
    fn round_trip_restores_parameters() {
        let (cfg, vocab, table) = setup();
        let g = MaskGenerator::new(&cfg, DType::F32, &Device::Cpu).unwrap();
        let r = Reconstructor::new(&cfg, DType::F32, &Device::Cpu).unwrap();
        let ck = Checkpoint::capture(&cfg, &vocab, &table, 3, &g, &r).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        ck.write(&path).unwrap();
        let back = Checkpoint::read(&path).unwrap();
        assert_eq!(back.epoch, 3);
        assert_eq!(back.vocab.tokens(), vocab.tokens());
        assert_eq!(back.table, table);
        assert_eq!(back.sections, ck.sections);
        let (g2, r2) = back.restore(DType::F32, &Device::Cpu).unwrap();
        assert_eq!(g2.store().snapshot().unwrap(), g.store().snapshot().unwrap());
        assert_eq!(r2.store().snapshot().unwrap(), r.store().snapshot().unwrap());
    }

    #[test]
    fn corruption_and_mismatch_are_reported() {
        let (cfg, vocab, table) = setup();
        let g = MaskGenerator::new(&cfg, DType::F32, &Device::Cpu).unwrap();
        let r = Reconstructor::new(&cfg, DType::F32, &Device::Cpu).unwrap();
        let ck = Checkpoint::capture(&cfg, &vocab, &table, 0, &g, &r).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        ck.write(&path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(Checkpoint::read(&path), Err(Error::Checkpoint(_))));
        fs::write(&path, b"nope").unwrap();
        assert!(matches!(Checkpoint::read(&path), Err(Error::Checkpoint(_))));
        assert!(matches!(
            Checkpoint::read(&dir.path().join("absent")),
            Err(Error::MissingFile(_))
        ));
        let other = TrainConfig { k: 2, ..cfg.clone() };
        assert!(matches!(ck.check_compatible(&other), Err(Error::FingerprintMismatch { .. })));
        assert!(ck.check_compatible(&cfg).is_ok());
    }
}
