//! Vocabulary-square green matrix: row `u` is the forward green list given
//! predecessor `u`, column `w` is the backward green list given successor
//! `w`. Materialized as packed row-major bits for O(1) lookups, with a
//! virtual fallback that recomputes from the keyed partition when the square
//! would not fit the memory budget.

use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;
use thiserror::Error;

use crate::bitset::Bitset;
use crate::partition::{KeyedPartition, TokenId, SCHEME_VERSION};

#[derive(Debug, Error)]
pub enum MatrixError {
    #[error(
        "green matrix for |V|={vocab_size} needs {required} bytes, budget is {budget}; \
         use the virtual (on-the-fly) mode instead"
    )]
    BudgetExceeded {
        vocab_size: u32,
        required: usize,
        budget: usize,
    },
    #[error("token {token} out of range for vocabulary of {vocab_size}")]
    TokenOutOfRange { token: u32, vocab_size: u32 },
    #[error("matrix cache is corrupt: {0}")]
    BadCache(String),
    #[error(
        "matrix cache was built with scheme version {found}, this build implements {expected}"
    )]
    SchemeMismatch { found: u32, expected: u32 },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Read access to green-list structure, independent of representation.
pub trait GreenLookup: Send + Sync {
    fn vocab_size(&self) -> u32;

    /// Fingerprint of the key the structure was derived from.
    fn key_fingerprint(&self) -> u64;

    /// Is `v` forward-green given predecessor `prev`?
    fn is_green(&self, prev: TokenId, v: TokenId) -> bool;

    /// Forward green list: bit `v` set iff `v` is green given `prev`.
    fn forward_green(&self, prev: TokenId) -> Result<Bitset, MatrixError>;

    /// Backward green list: bit `u` set iff choosing `u` here makes `next`
    /// forward-green at the following position.
    fn backward_green(&self, next: TokenId) -> Result<Bitset, MatrixError>;
}

const CACHE_MAGIC: [u8; 8] = *b"DMRKGMTX";

/// Fully materialized |V|x|V| bit matrix, row-major over 64-bit words.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GreenMatrix {
    words: Vec<u64>,
    vocab_size: u32,
    row_words: usize,
    key_fingerprint: u64,
}

impl GreenMatrix {
    /// Default materialization budget: 256 MiB of packed bits (|V| up to
    /// ~46k). Toy vocabularies use a fraction of this.
    pub const DEFAULT_BUDGET_BYTES: usize = 256 << 20;

    pub fn build(partition: &KeyedPartition) -> Result<Self, MatrixError> {
        Self::build_with_budget(partition, Self::DEFAULT_BUDGET_BYTES)
    }

    pub fn build_with_budget(
        partition: &KeyedPartition,
        budget_bytes: usize,
    ) -> Result<Self, MatrixError> {
        let v = partition.vocab_size() as usize;
        let row_words = v.div_ceil(64);
        let required = v * row_words * 8;
        if required > budget_bytes {
            return Err(MatrixError::BudgetExceeded {
                vocab_size: partition.vocab_size(),
                required,
                budget: budget_bytes,
            });
        }
        // Row-parallel build; each row is an independent slice, so the
        // assembled bytes are identical to a sequential build.
        let mut words = vec![0u64; v * row_words];
        words
            .par_chunks_mut(row_words)
            .enumerate()
            .for_each(|(u, row)| {
                let set = partition.green_set(TokenId(u as u32));
                row.copy_from_slice(set.words());
            });
        Ok(GreenMatrix {
            words,
            vocab_size: partition.vocab_size(),
            row_words,
            key_fingerprint: partition.key().fingerprint(),
        })
    }

    /// Zero-copy view of row `prev`'s packed words.
    pub fn row_words(&self, prev: TokenId) -> Result<&[u64], MatrixError> {
        self.check(prev)?;
        let start = prev.index() * self.row_words;
        Ok(&self.words[start..start + self.row_words])
    }

    fn check(&self, t: TokenId) -> Result<(), MatrixError> {
        if t.0 >= self.vocab_size {
            return Err(MatrixError::TokenOutOfRange {
                token: t.0,
                vocab_size: self.vocab_size,
            });
        }
        Ok(())
    }

    /// Serialize: magic, scheme version, vocab size, key fingerprint, then
    /// the packed words little-endian.
    pub fn save(&self, path: &Path) -> Result<(), MatrixError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(&CACHE_MAGIC)?;
        f.write_all(&SCHEME_VERSION.to_le_bytes())?;
        f.write_all(&self.vocab_size.to_le_bytes())?;
        f.write_all(&self.key_fingerprint.to_le_bytes())?;
        for w in &self.words {
            f.write_all(&w.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, MatrixError> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 8];
        f.read_exact(&mut magic)?;
        if magic != CACHE_MAGIC {
            return Err(MatrixError::BadCache("bad magic".into()));
        }
        let mut b4 = [0u8; 4];
        f.read_exact(&mut b4)?;
        let scheme = u32::from_le_bytes(b4);
        if scheme != SCHEME_VERSION {
            return Err(MatrixError::SchemeMismatch {
                found: scheme,
                expected: SCHEME_VERSION,
            });
        }
        f.read_exact(&mut b4)?;
        let vocab_size = u32::from_le_bytes(b4);
        if vocab_size < 2 {
            return Err(MatrixError::BadCache(format!(
                "vocab size {vocab_size} too small"
            )));
        }
        let mut b8 = [0u8; 8];
        f.read_exact(&mut b8)?;
        let key_fingerprint = u64::from_le_bytes(b8);
        let row_words = (vocab_size as usize).div_ceil(64);
        let n_words = vocab_size as usize * row_words;
        let mut words = Vec::with_capacity(n_words);
        for _ in 0..n_words {
            f.read_exact(&mut b8)?;
            words.push(u64::from_le_bytes(b8));
        }
        if f.read(&mut [0u8; 1])? != 0 {
            return Err(MatrixError::BadCache("trailing bytes".into()));
        }
        Ok(GreenMatrix {
            words,
            vocab_size,
            row_words,
            key_fingerprint,
        })
    }

    pub fn total_ones(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }
}

impl GreenLookup for GreenMatrix {
    fn vocab_size(&self) -> u32 {
        self.vocab_size
    }

    fn key_fingerprint(&self) -> u64 {
        self.key_fingerprint
    }

    #[inline]
    fn is_green(&self, prev: TokenId, v: TokenId) -> bool {
        debug_assert!(prev.0 < self.vocab_size && v.0 < self.vocab_size);
        let w = self.words[prev.index() * self.row_words + v.index() / 64];
        (w >> (v.index() % 64)) & 1 == 1
    }

    fn forward_green(&self, prev: TokenId) -> Result<Bitset, MatrixError> {
        Ok(Bitset::from_words(
            self.row_words(prev)?.to_vec(),
            self.vocab_size as usize,
        ))
    }

    fn backward_green(&self, next: TokenId) -> Result<Bitset, MatrixError> {
        self.check(next)?;
        // Strided gather down column `next`; no transposed copy is kept.
        let (word, shift) = (next.index() / 64, next.index() % 64);
        let v = self.vocab_size as usize;
        let mut out = vec![0u64; v.div_ceil(64)];
        for u in 0..v {
            let bit = (self.words[u * self.row_words + word] >> shift) & 1;
            out[u / 64] |= bit << (u % 64);
        }
        Ok(Bitset::from_words(out, v))
    }
}

/// On-demand equivalent of [`GreenMatrix`] for vocabularies whose square
/// exceeds the budget. Same observable behavior, no storage.
#[derive(Debug, Clone)]
pub struct VirtualGreenMatrix {
    partition: KeyedPartition,
}

impl VirtualGreenMatrix {
    pub fn new(partition: KeyedPartition) -> Self {
        VirtualGreenMatrix { partition }
    }
}

impl GreenLookup for VirtualGreenMatrix {
    fn vocab_size(&self) -> u32 {
        self.partition.vocab_size()
    }

    fn key_fingerprint(&self) -> u64 {
        self.partition.key().fingerprint()
    }

    #[inline]
    fn is_green(&self, prev: TokenId, v: TokenId) -> bool {
        self.partition.is_green(prev, v)
    }

    fn forward_green(&self, prev: TokenId) -> Result<Bitset, MatrixError> {
        if prev.0 >= self.vocab_size() {
            return Err(MatrixError::TokenOutOfRange {
                token: prev.0,
                vocab_size: self.vocab_size(),
            });
        }
        Ok(self.partition.green_set(prev))
    }

    fn backward_green(&self, next: TokenId) -> Result<Bitset, MatrixError> {
        if next.0 >= self.vocab_size() {
            return Err(MatrixError::TokenOutOfRange {
                token: next.0,
                vocab_size: self.vocab_size(),
            });
        }
        let v = self.vocab_size() as usize;
        let mut out = Bitset::new(v);
        for u in 0..v {
            if self.partition.is_green(TokenId(u as u32), next) {
                out.set(u);
            }
        }
        Ok(out)
    }
}
