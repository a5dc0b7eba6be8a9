use std::path::Path;

use crate::codec::ByteReader;
use crate::error::{Error, Result};

const MASK_MAGIC: &[u8; 4] = b"PRWM";
const MASK_VERSION: u32 = 1;

/// Element-wise pruning mask over the flat weight vector. `true` keeps the
/// weight, `false` prunes it.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    bits: Vec<bool>,
}

impl Mask {
    pub fn ones(d: usize) -> Self {
        Self {
            bits: vec![true; d],
        }
    }

    pub fn zeros(d: usize) -> Self {
        Self {
            bits: vec![false; d],
        }
    }

    pub fn from_bits(bits: Vec<bool>) -> Self {
        Self { bits }
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn get(&self, i: usize) -> bool {
        self.bits[i]
    }

    pub fn set(&mut self, i: usize, keep: bool) {
        self.bits[i] = keep;
    }

    pub fn surviving(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Fraction of surviving weights.
    pub fn density(&self) -> f64 {
        if self.bits.is_empty() {
            return 0.0;
        }
        self.surviving() as f64 / self.bits.len() as f64
    }

    /// `d / surviving`. A mask with no survivors has no compression ratio.
    pub fn compression_ratio(&self) -> Result<f64> {
        match self.surviving() {
            0 => Err(Error::NoSurvivors),
            s => Ok(self.bits.len() as f64 / s as f64),
        }
    }

    /// Elementwise `self <= other`.
    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.len() == other.len() && self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }

    pub fn intersect(&self, other: &Mask) -> Result<Mask> {
        self.check_len(other.len())?;
        Ok(Mask {
            bits: self.bits.iter().zip(&other.bits).map(|(&a, &b)| a && b).collect(),
        })
    }

    pub fn check_len(&self, d: usize) -> Result<()> {
        if self.bits.len() != d {
            return Err(Error::LengthMismatch {
                what: "mask",
                expected: d,
                actual: self.bits.len(),
            });
        }
        Ok(())
    }

    /// Sets pruned positions of `values` to exactly `0.0`.
    pub fn apply(&self, values: &mut [f32]) {
        for (v, &keep) in values.iter_mut().zip(&self.bits) {
            if !keep {
                *v = 0.0;
            }
        }
    }

    /// `W ⊙ m` as a new vector.
    pub fn masked(&self, values: &[f32]) -> Vec<f32> {
        values
            .iter()
            .zip(&self.bits)
            .map(|(&v, &keep)| if keep { v } else { 0.0 })
            .collect()
    }

    /// Magic, version, `d` as u64, then the bitmap packed LSB-first.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.bits.len().div_ceil(8));
        out.extend_from_slice(MASK_MAGIC);
        out.extend_from_slice(&MASK_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.bits.len() as u64).to_le_bytes());
        for chunk in self.bits.chunks(8) {
            let byte = chunk
                .iter()
                .enumerate()
                .fold(0u8, |acc, (i, &b)| acc | ((b as u8) << i));
            out.push(byte);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.expect_magic(MASK_MAGIC)?;
        let at = r.offset();
        let version = r.u32_le("version")?;
        if version != MASK_VERSION {
            return Err(Error::parse(at, format!("unsupported version {version}")));
        }
        let d = r.u64_le("mask length")? as usize;
        let at = r.offset();
        let packed = r.take(d.div_ceil(8), "bitmap")?;
        r.finish()?;
        let bits: Vec<bool> = (0..d).map(|i| packed[i / 8] >> (i % 8) & 1 == 1).collect();
        if !d.is_multiple_of(8) && packed[d / 8] >> (d % 8) != 0 {
            return Err(Error::parse(
                at + d / 8,
                "padding bits after the last mask entry must be zero",
            ));
        }
        Ok(Self { bits })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
