//! Binary feature cache.
//!
//! Little-endian throughout:
//!
//! ```text
//! header:  magic "MCEF" | version u32 | count u32 | dim u32
//! record:  image_id u64 | label u8 | branch u8 | dim x f32
//! ```
//!
//! The branch byte is the colorspace code ([`branch_code`]).

use std::collections::HashSet;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::backbone::FeatureVector;
use crate::colorspace::ColorspaceId;
use crate::error::{Error, Result};
use crate::Class;

pub const MAGIC: &[u8; 4] = b"MCEF";
pub const VERSION: u32 = 1;

pub fn branch_code(space: ColorspaceId) -> u8 {
    ColorspaceId::ALL
        .iter()
        .position(|&c| c == space)
        .expect("ALL lists every colorspace") as u8
}

pub fn branch_from_code(code: u8) -> Result<ColorspaceId> {
    ColorspaceId::ALL
        .get(code as usize)
        .copied()
        .ok_or_else(|| Error::format("feature cache", format!("unknown branch code {code}")))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CacheRecord {
    pub label: Class,
    pub feature: FeatureVector,
}

/// All records of one branch.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureCache {
    dim: usize,
    records: Vec<CacheRecord>,
}

impl FeatureCache {
    pub fn new(dim: usize) -> Self {
        FeatureCache {
            dim,
            records: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn records(&self) -> &[CacheRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn ids(&self) -> HashSet<u64> {
        self.records.iter().map(|r| r.feature.image_id).collect()
    }

    pub fn get(&self, image_id: u64) -> Option<&CacheRecord> {
        self.records.iter().find(|r| r.feature.image_id == image_id)
    }

    pub fn push(&mut self, record: CacheRecord) -> Result<()> {
        if record.feature.values.len() != self.dim {
            return Err(Error::Contract(format!(
                "feature of width {} does not fit a cache of width {}",
                record.feature.values.len(),
                self.dim
            )));
        }
        self.records.push(record);
        Ok(())
    }

    /// Orders records by image id so rewritten caches are byte-stable.
    pub fn sort(&mut self) {
        self.records.sort_by_key(|r| r.feature.image_id);
    }

    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.records.len() as u32).to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        for r in &self.records {
            w.write_all(&r.feature.image_id.to_le_bytes())?;
            w.write_all(&[r.label.index() as u8, branch_code(r.feature.branch)])?;
            for v in &r.feature.values {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let bad = |reason: &str| Error::format("feature cache", reason);
        let mut header = [0u8; 16];
        r.read_exact(&mut header).map_err(|_| bad("truncated header"))?;
        if &header[..4] != MAGIC {
            return Err(bad("bad magic"));
        }
        let word = |i: usize| u32::from_le_bytes(header[i..i + 4].try_into().unwrap());
        if word(4) != VERSION {
            return Err(bad(&format!("unsupported version {}", word(4))));
        }
        let count = word(8) as usize;
        let dim = word(12) as usize;
        let mut cache = FeatureCache::new(dim);
        let mut buf = vec![0u8; 10 + 4 * dim];
        for i in 0..count {
            r.read_exact(&mut buf)
                .map_err(|_| bad(&format!("truncated at record {i} of {count}")))?;
            let image_id = u64::from_le_bytes(buf[..8].try_into().unwrap());
            let label =
                Class::from_index(buf[8] as usize).ok_or_else(|| bad(&format!("invalid label byte {}", buf[8])))?;
            let branch = branch_from_code(buf[9])?;
            let values = buf[10..]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            cache.records.push(CacheRecord {
                label,
                feature: FeatureVector {
                    image_id,
                    branch,
                    values,
                },
            });
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest).map_err(|e| bad(&e.to_string()))? != 0 {
            return Err(bad("trailing bytes after last record"));
        }
        Ok(cache)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        FeatureCache::read_from(BufReader::new(file))
    }

    /// Writes atomically through a sibling temporary file.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        let file = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w).map_err(|e| Error::io(&tmp, e))?;
        w.into_inner()
            .map_err(|e| Error::io(&tmp, e.into_error()))?
            .sync_all()
            .map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> FeatureCache {
        let mut c = FeatureCache::new(3);
        for (id, label) in [(7u64, Class::Real), (2, Class::Gan)] {
            c.push(CacheRecord {
                label,
                feature: FeatureVector {
                    image_id: id,
                    branch: ColorspaceId::Lch,
                    values: vec![id as f32, -1.5, 0.25],
                },
            })
            .unwrap();
        }
        c
    }

    #[test]
    fn byte_layout() {
        let mut bytes = Vec::new();
        sample().write_to(&mut bytes).unwrap();
        assert_eq!(&bytes[..4], b"MCEF");
        assert_eq!(&bytes[4..16], &[1, 0, 0, 0, 2, 0, 0, 0, 3, 0, 0, 0]);
        assert_eq!(&bytes[16..24], &7u64.to_le_bytes());
        assert_eq!(bytes[24], 2);
        assert_eq!(bytes[25], branch_code(ColorspaceId::Lch));
        assert_eq!(&bytes[26..30], &7.0f32.to_le_bytes());
        assert_eq!(bytes.len(), 16 + 2 * (10 + 12));
        assert_eq!(FeatureCache::read_from(&bytes[..]).unwrap(), sample());
    }

    #[test]
    fn rejects_corruption() {
        let mut bytes = Vec::new();
        sample().write_to(&mut bytes).unwrap();
        assert!(FeatureCache::read_from(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(FeatureCache::read_from(&extra[..]).is_err());
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(FeatureCache::read_from(&magic[..]).is_err());
        let mut label = bytes;
        label[24] = 9;
        assert!(FeatureCache::read_from(&label[..]).is_err());
    }

    #[test]
    fn width_is_enforced() {
        let mut c = FeatureCache::new(4);
        let err = c.push(sample().records[0].clone());
        assert!(matches!(err, Err(Error::Contract(_))));
    }
}
