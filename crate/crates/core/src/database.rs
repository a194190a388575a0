//! Global descriptors and the brute-force submap database.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Pose2;
use crate::io::{read_poses_csv, write_poses_csv, IoError};

pub const DEFAULT_DESCRIPTOR_DIM: usize = 128;
const NORM_TOLERANCE: f32 = 1e-5;

#[derive(Debug, Error)]
pub enum DatabaseError {
    #[error("database is empty")]
    EmptyDatabase,
    #[error("duplicate submap id {0}")]
    DuplicateId(u64),
    #[error("descriptor has dimension {found}, database expects {expected}")]
    Dimension { expected: usize, found: usize },
    #[error("descriptor norm {0} is not 1")]
    NotNormalized(f32),
    #[error("zero-length or non-finite descriptor")]
    Degenerate,
    #[error("corrupt database: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Table(#[from] IoError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// L2-normalized descriptor.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalDescriptor {
    vector: Vec<f32>,
}

impl GlobalDescriptor {
    /// Normalizes `v` to unit length.
    pub fn normalized(mut v: Vec<f32>) -> Result<Self, DatabaseError> {
        let norm = v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        if !norm.is_finite() || norm == 0.0 {
            return Err(DatabaseError::Degenerate);
        }
        for x in &mut v {
            *x = (*x as f64 / norm) as f32;
        }
        Ok(Self { vector: v })
    }

    /// Accepts a vector that is already unit length.
    pub fn from_unit(v: Vec<f32>) -> Result<Self, DatabaseError> {
        let norm = v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt() as f32;
        if !norm.is_finite() || (norm - 1.0).abs() > NORM_TOLERANCE {
            return Err(DatabaseError::NotNormalized(norm));
        }
        Ok(Self { vector: v })
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.vector
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    pub fn squared_distance(&self, other: &[f32]) -> f32 {
        squared_l2(&self.vector, other)
    }
}

impl AsRef<[f32]> for GlobalDescriptor {
    fn as_ref(&self) -> &[f32] {
        &self.vector
    }
}

pub fn squared_l2(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubmapRecord {
    pub id: u64,
    pub pose: Pose2<f64>,
    pub descriptor: GlobalDescriptor,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Match {
    pub id: u64,
    pub pose: Pose2<f64>,
    pub distance: f32,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    dim: usize,
    count: usize,
    ids: Vec<u64>,
}

const MANIFEST_FORMAT: &str = "ralf-submap-db-v1";

/// Records kept sorted by id, which makes the tie-break a strict `<` scan.
#[derive(Debug, Clone, Default)]
pub struct SubmapDatabase {
    dim: Option<usize>,
    records: Vec<SubmapRecord>,
}

impl SubmapDatabase {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_records(records: impl IntoIterator<Item = SubmapRecord>) -> Result<Self, DatabaseError> {
        let mut db = Self::new();
        for r in records {
            db.insert(r)?;
        }
        Ok(db)
    }

    pub fn insert(&mut self, rec: SubmapRecord) -> Result<(), DatabaseError> {
        let dim = *self.dim.get_or_insert(rec.descriptor.dim());
        if rec.descriptor.dim() != dim {
            return Err(DatabaseError::Dimension {
                expected: dim,
                found: rec.descriptor.dim(),
            });
        }
        match self.records.binary_search_by_key(&rec.id, |r| r.id) {
            Ok(_) => Err(DatabaseError::DuplicateId(rec.id)),
            Err(pos) => {
                self.records.insert(pos, rec);
                Ok(())
            }
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.dim
    }

    pub fn records(&self) -> &[SubmapRecord] {
        &self.records
    }

    pub fn get(&self, id: u64) -> Option<&SubmapRecord> {
        self.records
            .binary_search_by_key(&id, |r| r.id)
            .ok()
            .map(|i| &self.records[i])
    }

    fn check_query(&self, q: &[f32]) -> Result<(), DatabaseError> {
        let dim = self.dim.ok_or(DatabaseError::EmptyDatabase)?;
        if q.len() != dim {
            return Err(DatabaseError::Dimension {
                expected: dim,
                found: q.len(),
            });
        }
        Ok(())
    }

    /// Nearest record by L2 distance; ties go to the lowest id.
    pub fn query(&self, q: &[f32]) -> Result<Match, DatabaseError> {
        self.check_query(q)?;
        let mut best = &self.records[0];
        let mut best_d = best.descriptor.squared_distance(q);
        for r in &self.records[1..] {
            let d = r.descriptor.squared_distance(q);
            if d < best_d {
                best = r;
                best_d = d;
            }
        }
        Ok(Match {
            id: best.id,
            pose: best.pose,
            distance: best_d.sqrt(),
        })
    }

    /// The `k` nearest records, ordered by (distance, id).
    pub fn top_k(&self, q: &[f32], k: usize) -> Result<Vec<Match>, DatabaseError> {
        self.check_query(q)?;
        let mut scored: Vec<(f32, usize)> = self
            .records
            .iter()
            .enumerate()
            .map(|(i, r)| (r.descriptor.squared_distance(q), i))
            .collect();
        scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        Ok(scored
            .into_iter()
            .take(k)
            .map(|(d, i)| Match {
                id: self.records[i].id,
                pose: self.records[i].pose,
                distance: d.sqrt(),
            })
            .collect())
    }

    /// Writes `manifest.json`, `descriptors.bin` (f32 LE, row-major) and `poses.csv` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<(), DatabaseError> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let manifest = Manifest {
            format: MANIFEST_FORMAT.into(),
            dim: self.dim.unwrap_or(DEFAULT_DESCRIPTOR_DIM),
            count: self.records.len(),
            ids: self.records.iter().map(|r| r.id).collect(),
        };
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        let mut bytes = Vec::with_capacity(self.records.len() * manifest.dim * 4);
        for r in &self.records {
            for v in r.descriptor.as_slice() {
                bytes.extend(v.to_le_bytes());
            }
        }
        fs::write(dir.join("descriptors.bin"), bytes)?;
        let poses: Vec<_> = self.records.iter().map(|r| (r.id, r.pose)).collect();
        write_poses_csv(dir.join("poses.csv"), &poses)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self, DatabaseError> {
        let dir = dir.as_ref();
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
        if manifest.format != MANIFEST_FORMAT {
            return Err(DatabaseError::Corrupt(format!("unknown format {}", manifest.format)));
        }
        if manifest.ids.len() != manifest.count {
            return Err(DatabaseError::Corrupt("id list length differs from count".into()));
        }
        let bytes = fs::read(dir.join("descriptors.bin"))?;
        if bytes.len() != manifest.count * manifest.dim * 4 {
            return Err(DatabaseError::Corrupt(format!(
                "descriptors.bin has {} bytes, expected {}",
                bytes.len(),
                manifest.count * manifest.dim * 4
            )));
        }
        let poses = read_poses_csv(dir.join("poses.csv"))?;
        if poses.len() != manifest.count {
            return Err(DatabaseError::Corrupt("poses.csv row count differs from count".into()));
        }
        let mut db = Self::new();
        if manifest.count == 0 {
            return Ok(db);
        }
        for (row, ((id, pose), chunk)) in poses.into_iter().zip(bytes.chunks_exact(manifest.dim * 4)).enumerate() {
            if id != manifest.ids[row] {
                return Err(DatabaseError::Corrupt(format!("row {row}: id {id} vs manifest")));
            }
            let v = chunk
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            db.insert(SubmapRecord {
                id,
                pose,
                descriptor: GlobalDescriptor::from_unit(v)?,
            })?;
        }
        let unique: HashSet<_> = db.records.iter().map(|r| r.id).collect();
        debug_assert_eq!(unique.len(), db.len());
        Ok(db)
    }
}
