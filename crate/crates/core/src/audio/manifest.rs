use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::AudioError;

const MOS_HEADER: [&str; 4] = ["utt_id", "wav_path", "score", "system_id"];
const PAIR_HEADER: [&str; 5] = ["pair_id", "wav_a", "wav_b", "score", "system_pair_id"];

/// Which score a model or manifest carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Task {
    /// Naturalness MOS in `[1, 5]` for a single utterance.
    Mos,
    /// Speaker similarity in `[1, 4]` for an utterance pair.
    Similarity,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Mos => "mos",
            Task::Similarity => "similarity",
        })
    }
}

impl FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mos" => Ok(Task::Mos),
            "similarity" | "sim" => Ok(Task::Similarity),
            other => Err(format!(
                "unknown task `{other}` (expected mos or similarity)"
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MosRow {
    pub utt_id: String,
    pub wav_path: PathBuf,
    pub score: f64,
    pub system_id: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRow {
    pub pair_id: String,
    pub wav_a: PathBuf,
    pub wav_b: PathBuf,
    pub score: f64,
    pub system_pair_id: String,
}

/// Rows binding audio to ground-truth scores and system ids.
#[derive(Clone, Debug, PartialEq)]
pub enum Manifest {
    Mos(Vec<MosRow>),
    Similarity(Vec<PairRow>),
}

impl Manifest {
    pub fn task(&self) -> Task {
        match self {
            Manifest::Mos(_) => Task::Mos,
            Manifest::Similarity(_) => Task::Similarity,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Manifest::Mos(r) => r.len(),
            Manifest::Similarity(r) => r.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Reads a manifest, choosing the schema from its header. Relative audio
    /// paths are resolved against the manifest's directory.
    pub fn read(path: impl AsRef<Path>) -> Result<Self, AudioError> {
        let path = path.as_ref();
        let err = |reason: String| AudioError::Manifest {
            path: path.to_path_buf(),
            reason,
        };
        let file = std::fs::File::open(path).map_err(|source| AudioError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(file);
        let header: Vec<String> = reader
            .headers()
            .map_err(|e| err(e.to_string()))?
            .iter()
            .map(str::to_owned)
            .collect();
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: PathBuf| if p.is_relative() { base.join(p) } else { p };
        if header == MOS_HEADER {
            let mut rows = Vec::new();
            for (i, rec) in reader.deserialize::<MosRow>().enumerate() {
                let mut row = rec.map_err(|e| err(format!("row {}: {e}", i + 1)))?;
                row.wav_path = resolve(row.wav_path);
                rows.push(row);
            }
            Ok(Manifest::Mos(rows))
        } else if header == PAIR_HEADER {
            let mut rows = Vec::new();
            for (i, rec) in reader.deserialize::<PairRow>().enumerate() {
                let mut row = rec.map_err(|e| err(format!("row {}: {e}", i + 1)))?;
                row.wav_a = resolve(row.wav_a);
                row.wav_b = resolve(row.wav_b);
                rows.push(row);
            }
            Ok(Manifest::Similarity(rows))
        } else {
            Err(err(format!(
                "unrecognized header `{}`; expected `{}` or `{}`",
                header.join(","),
                MOS_HEADER.join(","),
                PAIR_HEADER.join(",")
            )))
        }
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), AudioError> {
        let path = path.as_ref();
        let err = |e: csv::Error| AudioError::Manifest {
            path: path.to_path_buf(),
            reason: e.to_string(),
        };
        let mut w = csv::Writer::from_path(path).map_err(err)?;
        match self {
            Manifest::Mos(rows) => rows.iter().try_for_each(|r| w.serialize(r)),
            Manifest::Similarity(rows) => rows.iter().try_for_each(|r| w.serialize(r)),
        }
        .map_err(err)?;
        w.flush().map_err(|source| AudioError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}
