use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::Moment;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// One video/query pair. Ground truth is only expected on evaluation splits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub video_id: String,
    pub duration: f64,
    pub query: String,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub start: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub end: Option<f64>,
}

impl ManifestRecord {
    pub fn ground_truth(&self) -> Option<Moment> {
        match (self.start, self.end) {
            (Some(s), Some(e)) => Moment::within(s, e, self.duration).ok(),
            _ => None,
        }
    }

    /// Evaluation role: a non-train split tag. Whether ground truth is
    /// present is checked separately by [`DatasetManifest::eval_records`].
    pub fn is_eval(&self) -> bool {
        self.split != Split::Train
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if self.video_id.is_empty() {
            return Err("empty video_id".into());
        }
        if !(self.duration.is_finite() && self.duration > 0.0) {
            return Err(format!("duration must be positive, got {}", self.duration));
        }
        if self.query.trim().is_empty() {
            return Err("empty query".into());
        }
        match (self.start, self.end) {
            (None, None) => Ok(()),
            (Some(s), Some(e)) => Moment::within(s, e, self.duration)
                .map(|_| ())
                .map_err(|e| e.to_string()),
            _ => Err("start and end must be given together".into()),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn train_records(&self) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(|r| !r.is_eval())
    }

    /// Evaluation records paired with their ground truth. Fails when any
    /// evaluation record lacks it, or when there are none.
    pub fn eval_records(&self) -> Result<Vec<(&ManifestRecord, Moment)>> {
        let mut out = Vec::new();
        for r in self.records.iter().filter(|r| r.is_eval()) {
            let gt = r.ground_truth().ok_or_else(|| Error::InvalidRecord {
                record: r.video_id.clone(),
                msg: "evaluation record has no ground-truth start/end".into(),
            })?;
            out.push((r, gt));
        }
        if out.is_empty() {
            return Err(Error::InvalidArgument(
                "manifest has no evaluation (val/test) records".into(),
            ));
        }
        Ok(out)
    }

    pub fn find_video(&self, video_id: &str) -> Option<&ManifestRecord> {
        self.records.iter().find(|r| r.video_id == video_id)
    }
}

/// Reads a line-delimited JSON manifest and validates every record.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::MissingFile(path.to_path_buf()))
        }
        Err(e) => return Err(e.into()),
    };
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        rec.validate().map_err(|msg| Error::InvalidRecord {
            record: format!("{} (line {})", rec.video_id, i + 1),
            msg,
        })?;
        records.push(rec);
    }
    if records.is_empty() {
        log::warn!("manifest {} is empty", path.display());
    }
    Ok(DatasetManifest { records })
}

pub fn write_manifest(path: &Path, manifest: &DatasetManifest) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut w = BufWriter::new(fs::File::create(path)?);
    for r in &manifest.records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(text: &str) -> (tempfile::TempDir, std::path::PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        fs::write(&path, text).unwrap();
        (dir, path)
    }

    #[test]
    fn parses_mixed_splits() {
        let (_d, p) = write(concat!(
            r#"{"video_id":"v1","duration":30.0,"query":"a man runs","split":"train"}"#,
            "\n",
            r#"{"video_id":"v2","duration":20.0,"query":"a dog sits","split":"test","start":2.0,"end":8.5}"#,
            "\n",
            r#"{"video_id":"v3","duration":25.0,"query":"she opens a door","split":"val","start":0.0,"end":25.0}"#,
            "\n",
        ));
        let m = load_manifest(&p).unwrap();
        assert_eq!(m.len(), 3);
        assert_eq!(m.train_records().count(), 1);
        let eval = m.eval_records().unwrap();
        assert_eq!(eval.len(), 2);
        assert_eq!(eval[0].1, Moment::new(2.0, 8.5).unwrap());
    }

    #[test]
    fn rejects_reversed_moment_naming_record() {
        let (_d, p) = write(
            r#"{"video_id":"bad_clip","duration":30.0,"query":"x","split":"test","start":9.0,"end":3.0}"#,
        );
        let err = load_manifest(&p).unwrap_err();
        assert!(matches!(err, Error::InvalidRecord { .. }));
        assert!(err.to_string().contains("bad_clip"), "{err}");
    }

    #[test]
    fn empty_file_gives_empty_manifest() {
        let (_d, p) = write("");
        assert!(load_manifest(&p).unwrap().is_empty());
    }

    #[test]
    fn parse_error_reports_line() {
        let (_d, p) = write(concat!(
            r#"{"video_id":"v1","duration":30.0,"query":"a","split":"train"}"#,
            "\n{not json}\n"
        ));
        match load_manifest(&p).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn eval_split_without_ground_truth_is_an_error() {
        let (_d, p) = write(r#"{"video_id":"v","duration":3.0,"query":"a","split":"test"}"#);
        let m = load_manifest(&p).unwrap();
        assert!(m.eval_records().is_err());
    }

    #[test]
    fn write_then_load() {
        let m = DatasetManifest {
            records: vec![ManifestRecord {
                video_id: "v9".into(),
                duration: 12.5,
                query: "someone laughs".into(),
                split: Split::Val,
                start: Some(1.0),
                end: Some(4.0),
            }],
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("out.jsonl");
        write_manifest(&p, &m).unwrap();
        assert_eq!(load_manifest(&p).unwrap(), m);
    }
}
