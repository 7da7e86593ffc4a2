//! Per-vertex scalar fields and the SBDF binary container.
//!
//! Layout (all integers little-endian):
//!
//! | offset | size | content                                   |
//! |--------|------|-------------------------------------------|
//! | 0      | 4    | magic `SBDF`                              |
//! | 4      | 4    | u32 version (1)                           |
//! | 8      | 4    | u32 icosphere level                       |
//! | 12     | 4    | u32 vertex count                          |
//! | 16     | 1    | u8 kind (0 thickness, 1 delta)            |
//! | 17     | 3    | reserved, zero                            |
//! | 20     | 4·V  | f32 values                                |
//! | 20+4V  | ⌈V/8⌉| validity mask, LSB-first within each byte |

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::icosphere::{vertex_count, MAX_LEVEL};

pub const SBDF_MAGIC: &[u8; 4] = b"SBDF";
pub const SBDF_VERSION: u32 = 1;
pub const SBDF_HEADER_LEN: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldKind {
    Thickness,
    Delta,
}

/// Scalar field over an icosphere. Masked vertices (medial wall) hold 0.
#[derive(Debug, Clone, PartialEq)]
pub struct VertexField {
    level: u32,
    kind: FieldKind,
    values: Vec<f32>,
    mask: Vec<bool>,
}

impl VertexField {
    pub fn new(level: u32, kind: FieldKind, values: Vec<f32>, mask: Vec<bool>) -> Result<Self> {
        if level > MAX_LEVEL {
            return Err(Error::range("field level", level, format!("0..={MAX_LEVEL}")));
        }
        let n = vertex_count(level);
        if values.len() != n || mask.len() != n {
            return Err(Error::Shape(format!(
                "level {level} field needs {n} values and mask bits, got {} and {}",
                values.len(),
                mask.len()
            )));
        }
        if let Some(i) = (0..n).find(|&i| !mask[i] && values[i] != 0.0) {
            return Err(Error::Shape(format!(
                "masked vertex {i} holds non-zero value {}",
                values[i]
            )));
        }
        Ok(VertexField {
            level,
            kind,
            values,
            mask,
        })
    }

    /// Rounds 64-bit values to storage precision, zeroing masked vertices.
    pub fn from_f64(level: u32, kind: FieldKind, values: &[f64], mask: &[bool]) -> Result<Self> {
        if values.len() != mask.len() {
            return Err(Error::Shape(format!(
                "{} values for {} mask bits",
                values.len(),
                mask.len()
            )));
        }
        let v = values
            .iter()
            .zip(mask)
            .map(|(&x, &ok)| if ok { x as f32 } else { 0.0 })
            .collect();
        VertexField::new(level, kind, v, mask.to_vec())
    }

    pub fn level(&self) -> u32 {
        self.level
    }

    pub fn kind(&self) -> FieldKind {
        self.kind
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| v as f64).collect()
    }

    pub fn num_valid(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Mean over unmasked vertices.
    pub fn mean_valid(&self) -> f64 {
        let n = self.num_valid();
        if n == 0 {
            return 0.0;
        }
        self.values
            .iter()
            .zip(&self.mask)
            .filter(|(_, &m)| m)
            .map(|(&v, _)| v as f64)
            .sum::<f64>()
            / n as f64
    }

    /// Errors unless `other` lives on the same level with the same mask.
    pub fn check_compatible(&self, other: &VertexField) -> Result<()> {
        if self.level != other.level {
            return Err(Error::LevelMismatch {
                expected: self.level,
                got: other.level,
            });
        }
        if self.mask != other.mask {
            return Err(Error::Shape("fields carry different masks".into()));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.values.len();
        let mut out = Vec::with_capacity(SBDF_HEADER_LEN + 4 * n + n.div_ceil(8));
        out.extend_from_slice(SBDF_MAGIC);
        out.extend_from_slice(&SBDF_VERSION.to_le_bytes());
        out.extend_from_slice(&self.level.to_le_bytes());
        out.extend_from_slice(&(n as u32).to_le_bytes());
        out.push(match self.kind {
            FieldKind::Thickness => 0,
            FieldKind::Delta => 1,
        });
        out.extend_from_slice(&[0, 0, 0]);
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let mut bits = vec![0u8; n.div_ceil(8)];
        for (i, &m) in self.mask.iter().enumerate() {
            if m {
                bits[i / 8] |= 1 << (i % 8);
            }
        }
        out.extend_from_slice(&bits);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let err = |offset: usize, msg: String| Error::Format {
            offset: offset as u64,
            msg,
        };
        let u32_at = |offset: usize| -> Result<u32> {
            bytes
                .get(offset..offset + 4)
                .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
                .ok_or_else(|| err(bytes.len(), "truncated header".into()))
        };
        if bytes.len() < 4 || &bytes[..4] != SBDF_MAGIC {
            return Err(err(0, "bad magic, expected SBDF".into()));
        }
        let version = u32_at(4)?;
        if version != SBDF_VERSION {
            return Err(err(4, format!("unsupported version {version}")));
        }
        let level = u32_at(8)?;
        if level > MAX_LEVEL {
            return Err(err(8, format!("level {level} exceeds {MAX_LEVEL}")));
        }
        let count = u32_at(12)? as usize;
        let expected = vertex_count(level);
        if count != expected {
            return Err(err(
                12,
                format!("vertex count {count} does not match level {level} ({expected})"),
            ));
        }
        let kind = match bytes.get(16) {
            Some(0) => FieldKind::Thickness,
            Some(1) => FieldKind::Delta,
            Some(k) => return Err(err(16, format!("unknown field kind {k}"))),
            None => return Err(err(bytes.len(), "truncated header".into())),
        };
        match bytes.get(17..20) {
            Some([0, 0, 0]) => {}
            Some(_) => return Err(err(17, "reserved bytes must be zero".into())),
            None => return Err(err(bytes.len(), "truncated header".into())),
        }
        let total = SBDF_HEADER_LEN + 4 * count + count.div_ceil(8);
        if bytes.len() < total {
            return Err(err(bytes.len(), format!("truncated payload, expected {total} bytes")));
        }
        if bytes.len() > total {
            return Err(err(total, format!("{} trailing bytes", bytes.len() - total)));
        }
        let values: Vec<f32> = bytes[SBDF_HEADER_LEN..SBDF_HEADER_LEN + 4 * count]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let bits = &bytes[SBDF_HEADER_LEN + 4 * count..];
        let mask: Vec<bool> = (0..count).map(|i| bits[i / 8] >> (i % 8) & 1 == 1).collect();
        if let Some(i) = (0..count).find(|&i| !mask[i] && values[i] != 0.0) {
            return Err(err(SBDF_HEADER_LEN + 4 * i, format!("masked vertex {i} is non-zero")));
        }
        Ok(VertexField {
            level,
            kind,
            values,
            mask,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        VertexField::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn field(level: u32) -> VertexField {
        let n = vertex_count(level);
        let mask: Vec<bool> = (0..n).map(|i| i % 11 != 3).collect();
        let values = (0..n)
            .map(|i| if mask[i] { 1.0 + i as f32 * 0.01 } else { 0.0 })
            .collect();
        VertexField::new(level, FieldKind::Thickness, values, mask).unwrap()
    }

    #[test]
    fn level_two_file_size() {
        // 20-byte header, 162 f32 values, 21 mask bytes.
        assert_eq!(field(2).to_bytes().len(), 20 + 162 * 4 + 21);
    }

    #[test]
    fn truncation_and_corruption_are_format_errors() {
        let bytes = field(1).to_bytes();
        for cut in [0, 3, 10, 19, 25, bytes.len() - 1] {
            assert!(
                matches!(VertexField::from_bytes(&bytes[..cut]), Err(Error::Format { .. })),
                "cut {cut}"
            );
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            VertexField::from_bytes(&bad),
            Err(Error::Format { offset: 0, .. })
        ));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(
            VertexField::from_bytes(&bad),
            Err(Error::Format { offset: 4, .. })
        ));
        let mut bad = bytes.clone();
        bad[12] = 41;
        assert!(matches!(
            VertexField::from_bytes(&bad),
            Err(Error::Format { offset: 12, .. })
        ));
        let mut bad = bytes;
        bad.push(0);
        assert!(matches!(VertexField::from_bytes(&bad), Err(Error::Format { .. })));
    }

    #[test]
    fn masked_values_must_be_zero() {
        let mut f = field(0);
        assert!(VertexField::new(0, FieldKind::Delta, vec![1.0; 12], f.mask.clone()).is_err());
        f.values[3] = 0.0;
        let z = VertexField::from_f64(0, FieldKind::Delta, &[5.0; 12], &f.mask).unwrap();
        assert_eq!(z.values()[3], 0.0);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.sbdf");
        let f = field(3);
        f.write(&path).unwrap();
        assert_eq!(VertexField::read(&path).unwrap(), f);
    }

    proptest! {
        #[test]
        fn bytes_round_trip_bit_exact(
            level in 0u32..3,
            seed in any::<u64>(),
            delta in any::<bool>(),
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let n = vertex_count(level);
            let mask: Vec<bool> = (0..n).map(|_| rng.random_bool(0.8)).collect();
            let values = mask.iter().map(|&m| if m { f32::from_bits(rng.random::<u32>() & 0x7f7f_ffff) } else { 0.0 }).collect();
            let kind = if delta { FieldKind::Delta } else { FieldKind::Thickness };
            let f = VertexField::new(level, kind, values, mask).unwrap();
            let back = VertexField::from_bytes(&f.to_bytes()).unwrap();
            prop_assert_eq!(back.to_bytes(), f.to_bytes());
        }
    }
}
