use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 4] = b"MCFT";

/// Dense row-major `f32` matrix as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::Shape(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

/// Clip features of one video after constant-interval sampling.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipFeatureSequence {
    pub video_id: String,
    pub duration: f64,
    pub features: FeatureMatrix,
}

impl ClipFeatureSequence {
    pub fn n_clips(&self) -> usize {
        self.features.rows
    }

    pub fn dim(&self) -> usize {
        self.features.cols
    }
}

/// Serializes a matrix as `MCFT | rows u32 | cols u32 | f32 LE row-major`.
pub fn encode_features(m: &FeatureMatrix, out: &mut impl Write) -> std::io::Result<()> {
    out.write_all(FEATURE_MAGIC)?;
    out.write_all(&(m.rows as u32).to_le_bytes())?;
    out.write_all(&(m.cols as u32).to_le_bytes())?;
    for v in &m.data {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Decodes one matrix block from the front of `bytes`, returning it and the
/// number of bytes consumed.
pub fn decode_features(bytes: &[u8]) -> std::result::Result<(FeatureMatrix, usize), String> {
    if bytes.len() < 12 {
        return Err("truncated header".into());
    }
    if &bytes[..4] != FEATURE_MAGIC {
        return Err("bad magic".into());
    }
    let rows = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let n = rows
        .checked_mul(cols)
        .ok_or_else(|| "matrix size overflow".to_string())?;
    let end = 12 + n * 4;
    if bytes.len() < end {
        return Err(format!("truncated data: need {n} values"));
    }
    let data = bytes[12..end]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((FeatureMatrix { rows, cols, data }, end))
}

pub fn write_features(path: &Path, m: &FeatureMatrix) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut w = BufWriter::new(fs::File::create(path)?);
    encode_features(m, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn read_features(path: &Path) -> Result<FeatureMatrix> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::MissingFile(path.to_path_buf()))
        }
        Err(e) => return Err(e.into()),
    };
    let (m, used) = decode_features(&bytes).map_err(|msg| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        msg,
    })?;
    if used != bytes.len() {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            msg: format!("{} trailing bytes", bytes.len() - used),
        });
    }
    Ok(m)
}

pub fn feature_path(dir: &Path, video_id: &str) -> PathBuf {
    dir.join(format!("{video_id}.mcft"))
}

/// Reads the raw clip-feature matrix of `video_id` from `dir`.
pub fn load_clip_features(dir: &Path, video_id: &str, d_v: usize) -> Result<FeatureMatrix> {
    let path = feature_path(dir, video_id);
    let m = read_features(&path)?;
    if m.cols != d_v {
        return Err(Error::WidthMismatch {
            path,
            expected: d_v,
            found: m.cols,
        });
    }
    if m.rows == 0 {
        return Err(Error::Parse {
            path,
            line: 0,
            msg: "feature file has no rows".into(),
        });
    }
    if let Some(row) = (0..m.rows).find(|&r| m.row(r).iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite { path, row });
    }
    Ok(m)
}

/// Picks `n_v` rows at a constant interval: output row `j` is raw row
/// `floor(j * L / n_v)`. Short videos repeat rows.
pub fn sample_clips(
    raw: &FeatureMatrix,
    n_v: usize,
    video_id: &str,
    duration: f64,
) -> Result<ClipFeatureSequence> {
    if raw.rows == 0 || n_v == 0 {
        return Err(Error::InvalidArgument(format!(
            "cannot sample {n_v} clips from {} rows",
            raw.rows
        )));
    }
    let mut data = Vec::with_capacity(n_v * raw.cols);
    for j in 0..n_v {
        let src = j * raw.rows / n_v;
        data.extend_from_slice(raw.row(src));
    }
    Ok(ClipFeatureSequence {
        video_id: video_id.to_string(),
        duration,
        features: FeatureMatrix {
            rows: n_v,
            cols: raw.cols,
            data,
        },
    })
}
