use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::vocab::{Vocab, MASK_ID, PAD_ID};
use crate::error::{Error, Result};

const MISSING_SCALE: f32 = 0.1;

/// One embedding row per vocabulary id.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    rows: Vec<f32>,
}

impl EmbeddingTable {
    pub fn from_rows(dim: usize, rows: Vec<f32>) -> Result<Self> {
        if dim == 0 || rows.len() % dim != 0 {
            return Err(Error::Shape(format!(
                "{} values do not form rows of width {dim}",
                rows.len()
            )));
        }
        Ok(Self { dim, rows })
    }

    /// A table where every word gets the seeded fallback row.
    pub fn random(vocab: &Vocab, dim: usize, seed: u64) -> Self {
        let mut rows = vec![0.0f32; vocab.len() * dim];
        for id in 0..vocab.len() as u32 {
            fill_fallback(&mut rows, id, dim, seed);
        }
        Self { dim, rows }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.rows.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn row(&self, id: u32) -> &[f32] {
        let i = id as usize;
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.rows
    }
}

// PAD and MASK stay zero; the reconstructor owns a learned MASK row.
fn fill_fallback(rows: &mut [f32], id: u32, dim: usize, seed: u64) {
    if id == PAD_ID || id == MASK_ID {
        return;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id as u64);
    let dst = &mut rows[id as usize * dim..(id as usize + 1) * dim];
    for v in dst {
        let x: f32 = StandardNormal.sample(&mut rng);
        *v = x * MISSING_SCALE;
    }
}

/// Reads a `token v1 .. v_dw` text table. Vocabulary words missing from the
/// file get a seeded random row scaled by 0.1; PAD is all zeros.
pub fn load_embedding_table(path: &Path, vocab: &Vocab, d_w: usize, seed: u64) -> Result<EmbeddingTable> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::MissingFile(path.to_path_buf()))
        }
        Err(e) => return Err(e.into()),
    };
    let mut rows = vec![0.0f32; vocab.len() * d_w];
    let mut found = vec![false; vocab.len()];
    for (i, line) in text.lines().enumerate() {
        let mut parts = line.split_whitespace();
        let Some(token) = parts.next() else { continue };
        let values = parts
            .map(str::parse::<f32>)
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: format!("malformed value: {e}"),
            })?;
        if values.len() != d_w {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: format!("expected {d_w} values, found {}", values.len()),
            });
        }
        if let Some(id) = vocab.id(token) {
            if id == PAD_ID || id == MASK_ID {
                continue;
            }
            let start = id as usize * d_w;
            rows[start..start + d_w].copy_from_slice(&values);
            found[id as usize] = true;
        }
    }
    for (id, hit) in found.iter().enumerate() {
        if !hit {
            fill_fallback(&mut rows, id as u32, d_w, seed);
        }
    }
    Ok(EmbeddingTable { dim: d_w, rows })
}

pub fn write_embedding_table<'a, I>(path: &Path, dim: usize, entries: I) -> Result<()>
where
    I: IntoIterator<Item = (&'a str, &'a [f32])>,
{
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut w = BufWriter::new(fs::File::create(path)?);
    for (token, row) in entries {
        if row.len() != dim {
            return Err(Error::Shape(format!("row for `{token}` has width {}", row.len())));
        }
        write!(w, "{token}")?;
        for v in row {
            write!(w, " {v}")?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::vocab::UNK_ID;

    fn vocab() -> Vocab {
        Vocab::from_tokens(["man", "runs", "ghost"]).unwrap()
    }

    fn table_file(text: &str) -> (tempfile::TempDir, std::path::PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("emb.txt");
        fs::write(&p, text).unwrap();
        (dir, p)
    }

    #[test]
    fn present_tokens_get_file_rows() {
        let (_d, p) = table_file("man 1 2 3\nruns -1 0.5 0.25\nunused 9 9 9\n");
        let v = vocab();
        let t = load_embedding_table(&p, &v, 3, 11).unwrap();
        assert_eq!(t.row(v.id("man").unwrap()), &[1.0, 2.0, 3.0]);
        assert_eq!(t.row(v.id("runs").unwrap()), &[-1.0, 0.5, 0.25]);
        assert_eq!(t.row(PAD_ID), &[0.0; 3]);
    }

    #[test]
    fn missing_tokens_are_seeded() {
        let (_d, p) = table_file("man 1 2 3\n");
        let v = vocab();
        let a = load_embedding_table(&p, &v, 3, 11).unwrap();
        let b = load_embedding_table(&p, &v, 3, 11).unwrap();
        let c = load_embedding_table(&p, &v, 3, 12).unwrap();
        let ghost = v.id("ghost").unwrap();
        assert_eq!(a.row(ghost), b.row(ghost));
        assert_ne!(a.row(ghost), c.row(ghost));
        assert!(a.row(ghost).iter().all(|x| x.abs() < 1.0));
        assert!(a.row(UNK_ID).iter().any(|&x| x != 0.0));
    }

    #[test]
    fn dimension_mismatch_and_garbage_fail() {
        let v = vocab();
        let (_d, p) = table_file("man 1 2\n");
        assert!(matches!(
            load_embedding_table(&p, &v, 3, 0),
            Err(Error::Parse { line: 1, .. })
        ));
        let (_d2, p2) = table_file("man 1 two 3\n");
        assert!(load_embedding_table(&p2, &v, 3, 0).is_err());
    }
}
