//! Durable training snapshots. Rewinding restores weights, momentum and the
//! data-order RNG key exactly as they were at a recorded epoch.
//!
//! File layout (`.prws`): magic `PRWS`, version `u32`, epoch `f64`, `d` as
//! `u64`, weights and velocity as `f32`, a 32-byte RNG key, then a CRC-32C
//! of everything before it. All integers and floats are little-endian.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use crc::{Crc, CRC_32_ISCSI};

use crate::codec::{put_f32s, ByteReader};
use crate::error::{Error, Result};

const SNAPSHOT_MAGIC: &[u8; 4] = b"PRWS";
const SNAPSHOT_VERSION: u32 = 1;
const SNAPSHOT_EXT: &str = "prws";
const CRC32C: Crc<u32> = Crc::<u32>::new(&CRC_32_ISCSI);

/// 256-bit key of the data-order generator.
pub type RngState = [u8; 32];

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub epoch: f64,
    pub weights: Vec<f32>,
    pub velocity: Vec<f32>,
    pub rng_state: RngState,
}

impl Snapshot {
    /// Position in the learning-rate schedule. Snapshots are only taken
    /// during original training, where it coincides with the epoch.
    pub fn schedule_position(&self) -> f64 {
        self.epoch
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if self.weights.len() != self.velocity.len() {
            return Err(Error::LengthMismatch {
                what: "velocity",
                expected: self.weights.len(),
                actual: self.velocity.len(),
            });
        }
        let d = self.weights.len();
        let mut out = Vec::with_capacity(60 + 8 * d);
        out.extend_from_slice(SNAPSHOT_MAGIC);
        out.extend_from_slice(&SNAPSHOT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&(d as u64).to_le_bytes());
        put_f32s(&mut out, &self.weights);
        put_f32s(&mut out, &self.velocity);
        out.extend_from_slice(&self.rng_state);
        let crc = CRC32C.checksum(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    /// Parses and checksum-verifies a snapshot; `path` is only used in errors.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(Error::parse(bytes.len(), "snapshot shorter than its checksum"));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(trailer.try_into().unwrap());
        let computed = CRC32C.checksum(body);
        if stored != computed {
            return Err(Error::Checksum {
                path: path.to_path_buf(),
                stored,
                computed,
            });
        }
        let mut r = ByteReader::new(body);
        r.expect_magic(SNAPSHOT_MAGIC)?;
        let at = r.offset();
        let version = r.u32_le("version")?;
        if version != SNAPSHOT_VERSION {
            return Err(Error::parse(at, format!("unsupported version {version}")));
        }
        let epoch = r.f64_le("epoch")?;
        let d = r.u64_le("parameter count")? as usize;
        let weights = r.f32_vec_le(d, "weights")?;
        let velocity = r.f32_vec_le(d, "velocity")?;
        let rng_state: RngState = r.take(32, "rng state")?.try_into().unwrap();
        r.finish()?;
        Ok(Self {
            epoch,
            weights,
            velocity,
            rng_state,
        })
    }
}

/// Append-only directory of snapshots for one training run.
#[derive(Debug, Clone)]
pub struct SnapshotStore {
    run_id: String,
    dir: PathBuf,
    entries: Vec<(f64, PathBuf)>,
}

impl SnapshotStore {
    /// Opens (creating if needed) the store at `base/run_id`, indexing any
    /// snapshots already on disk.
    pub fn open(base: impl AsRef<Path>, run_id: &str) -> Result<Self> {
        let dir = base.as_ref().join(run_id);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut entries = Vec::new();
        for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let path = entry.map_err(|e| Error::io(&dir, e))?.path();
            if path.extension().and_then(|e| e.to_str()) != Some(SNAPSHOT_EXT) {
                continue;
            }
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let snap = Snapshot::from_bytes(&bytes, &path)?;
            entries.push((snap.epoch, path));
        }
        entries.sort_by(|a, b| a.0.total_cmp(&b.0));
        Ok(Self {
            run_id: run_id.to_string(),
            dir,
            entries,
        })
    }

    /// Deletes every snapshot of this run.
    pub fn clear(&mut self) -> Result<()> {
        for (_, path) in self.entries.drain(..) {
            fs::remove_file(&path).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    pub fn run_id(&self) -> &str {
        &self.run_id
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn epochs(&self) -> Vec<f64> {
        self.entries.iter().map(|(e, _)| *e).collect()
    }

    pub fn contains(&self, epoch: f64) -> bool {
        self.entries.iter().any(|(e, _)| *e == epoch)
    }

    pub fn record(&mut self, snapshot: &Snapshot) -> Result<()> {
        let epoch = snapshot.epoch;
        if !(epoch >= 0.0 && epoch.is_finite()) {
            return Err(Error::Config(format!("snapshot epoch must be >= 0, got {epoch}")));
        }
        if self.contains(epoch) {
            return Err(Error::DuplicateSnapshot { epoch });
        }
        let bytes = snapshot.to_bytes()?;
        let path = self.dir.join(format!("epoch-{epoch}.{SNAPSHOT_EXT}"));
        let mut file = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        file.write_all(&bytes).map_err(|e| Error::io(&path, e))?;
        file.sync_all().map_err(|e| Error::io(&path, e))?;
        let at = self.entries.partition_point(|(e, _)| *e < epoch);
        self.entries.insert(at, (epoch, path));
        Ok(())
    }

    pub fn restore(&self, epoch: f64) -> Result<Snapshot> {
        let path = self
            .entries
            .iter()
            .find(|(e, _)| *e == epoch)
            .map(|(_, p)| p)
            .ok_or_else(|| Error::MissingSnapshot {
                epoch,
                available: self.epochs(),
            })?;
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Snapshot::from_bytes(&bytes, path)
    }
}

/// Epochs to snapshot during original training: 0, `T`, and every rewind
/// point `T - t` for the given retraining times.
pub fn retention_epochs(total: f64, retrain_times: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0, total];
    out.extend(
        retrain_times
            .iter()
            .filter(|&&t| t >= 0.0 && t <= total)
            .map(|&t| total - t),
    );
    out.sort_by(f64::total_cmp);
    out.dedup();
    out
}
