//! On-disk embedding files: `FEMB` for float embeddings, `BEMB` for packed
//! binary codes. Both are little-endian with a version-1 header.

use std::io::{Read, Write};
use std::path::Path;

use crate::data::{read_exact, read_f32, read_u32, read_u64};
use crate::error::{Error, Result};
use crate::retrieval::{binarize, words_for, BinaryCode};

const FLOAT_MAGIC: &[u8; 4] = b"FEMB";
const BINARY_MAGIC: &[u8; 4] = b"BEMB";
const VERSION: u32 = 1;

/// Embeddings keyed by record id, either float rows or packed codes.
#[derive(Debug, Clone, PartialEq)]
pub enum EmbeddingSet {
    Float {
        dim: usize,
        ids: Vec<u64>,
        /// `ids.len() × dim`, row-major.
        values: Vec<f32>,
    },
    Binary {
        dim_bits: usize,
        ids: Vec<u64>,
        codes: Vec<BinaryCode>,
    },
}

impl EmbeddingSet {
    pub fn ids(&self) -> &[u64] {
        match self {
            EmbeddingSet::Float { ids, .. } | EmbeddingSet::Binary { ids, .. } => ids,
        }
    }

    pub fn len(&self) -> usize {
        self.ids().len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids().is_empty()
    }

    /// Sign-thresholds float rows; binary sets are returned as is.
    pub fn to_binary(&self) -> Result<EmbeddingSet> {
        match self {
            EmbeddingSet::Binary { .. } => Ok(self.clone()),
            EmbeddingSet::Float { dim, ids, values } => {
                let codes = values.chunks(*dim).map(binarize).collect::<Result<_>>()?;
                Ok(EmbeddingSet::Binary {
                    dim_bits: *dim,
                    ids: ids.clone(),
                    codes,
                })
            }
        }
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        match self {
            EmbeddingSet::Float { dim, ids, values } => {
                w.write_all(FLOAT_MAGIC)?;
                w.write_all(&VERSION.to_le_bytes())?;
                w.write_all(&(*dim as u32).to_le_bytes())?;
                w.write_all(&(ids.len() as u64).to_le_bytes())?;
                for (id, row) in ids.iter().zip(values.chunks(*dim)) {
                    w.write_all(&id.to_le_bytes())?;
                    for v in row {
                        w.write_all(&v.to_le_bytes())?;
                    }
                }
            }
            EmbeddingSet::Binary { dim_bits, ids, codes } => {
                w.write_all(BINARY_MAGIC)?;
                w.write_all(&VERSION.to_le_bytes())?;
                w.write_all(&(*dim_bits as u32).to_le_bytes())?;
                w.write_all(&(ids.len() as u64).to_le_bytes())?;
                for (id, code) in ids.iter().zip(codes) {
                    w.write_all(&id.to_le_bytes())?;
                    for word in code.words() {
                        w.write_all(&word.to_le_bytes())?;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        let binary = match &magic {
            m if m == FLOAT_MAGIC => false,
            m if m == BINARY_MAGIC => true,
            _ => return Err(Error::Format(format!("bad embedding magic {magic:?}"))),
        };
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported embedding version {version}")));
        }
        let dim = read_u32(&mut r)? as usize;
        let count = read_u64(&mut r)? as usize;
        let mut ids = Vec::with_capacity(count.min(1 << 20));
        if binary {
            let mut codes = Vec::with_capacity(ids.capacity());
            for _ in 0..count {
                ids.push(read_u64(&mut r)?);
                let words = (0..words_for(dim)).map(|_| read_u64(&mut r)).collect::<Result<_>>()?;
                codes.push(BinaryCode::from_words(dim, words)?);
            }
            Ok(EmbeddingSet::Binary {
                dim_bits: dim,
                ids,
                codes,
            })
        } else {
            let mut values = Vec::with_capacity(ids.capacity() * dim);
            for _ in 0..count {
                ids.push(read_u64(&mut r)?);
                for _ in 0..dim {
                    values.push(read_f32(&mut r)?);
                }
            }
            Ok(EmbeddingSet::Float { dim, ids, values })
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(bytes.as_slice())
    }
}
