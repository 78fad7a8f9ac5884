//! Desk-scale bigram language model standing in for a masked-denoising
//! generator: every position gets a logit row from its (possibly missing)
//! left and right neighbors, so out-of-order unmasking is meaningful.

use std::io::{BufRead, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::partition::TokenId;

/// Zipf exponent of the unigram logits drawn by [`ToyLm::random`]: token
/// `t` gets `-ZIPF_EXPONENT * ln(1 + t)` plus noise, so hundreds of tokens
/// stay plausible and no-context sampling does not collapse onto a handful
/// of favorites.
const ZIPF_EXPONENT: f32 = 1.0;
/// Jitter on the unigram logits.
const UNIGRAM_JITTER: f32 = 0.8;
/// Per-context unigram coupling range for random bigram rows. Contexts near
/// -1 cancel the unigram and leave a flat (low-confidence) row; contexts
/// near the ends give confident conditionals.
const COUPLING_RANGE: (f32, f32) = (-2.6, 0.6);
/// Log-uniform range of the per-context noise spread.
const ROW_SIGMA_RANGE: (f32, f32) = (0.7, 6.0);

#[derive(Debug, Error)]
pub enum ToyModelError {
    #[error("bad model table: {0}")]
    BadTable(String),
    #[error("malformed model file: {0}")]
    MalformedFile(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Unigram + bigram logit tables with a weight for right-neighbor evidence.
///
/// `bigram[u * V + v]` scores token `v` given left neighbor `u`. The
/// transposed copy is kept so right-neighbor (column) reads stay contiguous.
#[derive(Debug, Clone)]
pub struct ToyLm {
    vocab_size: u32,
    backward_weight: f32,
    unigram: Vec<f32>,
    bigram: Vec<f32>,
    bigram_t: Vec<f32>,
}

impl ToyLm {
    /// Draw a model from a seed. The unigram comes first; then each bigram
    /// row `u` is `c_u * unigram + N(0, s_u)` with a per-context coupling
    /// `c_u` and noise spread `s_u` (coupling, spread, entries, in that
    /// order). Rows with coupling near -1 flatten the conditional into a
    /// genuinely ambiguous context; strongly coupled noisy rows sharpen it.
    /// The draw order is part of the reproducibility contract.
    pub fn random(vocab_size: u32, seed: u64, backward_weight: f32) -> Self {
        assert!(vocab_size >= 2, "vocabulary too small");
        assert!(
            (0.0..=1.0).contains(&backward_weight),
            "backward weight must be in [0, 1]"
        );
        let v = vocab_size as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let jitter = Normal::new(0.0f32, UNIGRAM_JITTER).unwrap();
        let unigram: Vec<f32> = (0..v)
            .map(|t| -ZIPF_EXPONENT * ((1 + t) as f32).ln() + jitter.sample(&mut rng))
            .collect();
        let mut bigram = vec![0.0f32; v * v];
        let (ln_lo, ln_hi) = (ROW_SIGMA_RANGE.0.ln(), ROW_SIGMA_RANGE.1.ln());
        for u in 0..v {
            let coupling: f32 = rng.random_range(COUPLING_RANGE.0..COUPLING_RANGE.1);
            let sigma: f32 = rng.random_range(ln_lo..ln_hi).exp();
            let noise = Normal::new(0.0f32, sigma).unwrap();
            let row = &mut bigram[u * v..(u + 1) * v];
            for (t, slot) in row.iter_mut().enumerate() {
                *slot = coupling * unigram[t] + noise.sample(&mut rng);
            }
        }
        Self::assemble(vocab_size, backward_weight, unigram, bigram)
    }

    pub fn from_tables(
        vocab_size: u32,
        backward_weight: f32,
        unigram: Vec<f32>,
        bigram: Vec<f32>,
    ) -> Result<Self, ToyModelError> {
        let v = vocab_size as usize;
        if v < 2 {
            return Err(ToyModelError::BadTable("vocabulary too small".into()));
        }
        if unigram.len() != v || bigram.len() != v * v {
            return Err(ToyModelError::BadTable(format!(
                "table sizes {}/{} do not match |V|={v}",
                unigram.len(),
                bigram.len()
            )));
        }
        if !(0.0..=1.0).contains(&backward_weight) {
            return Err(ToyModelError::BadTable(
                "backward weight must be in [0, 1]".into(),
            ));
        }
        if unigram.iter().chain(bigram.iter()).any(|x| !x.is_finite()) {
            return Err(ToyModelError::BadTable("non-finite logit".into()));
        }
        Ok(Self::assemble(vocab_size, backward_weight, unigram, bigram))
    }

    fn assemble(vocab_size: u32, backward_weight: f32, unigram: Vec<f32>, bigram: Vec<f32>) -> Self {
        let v = vocab_size as usize;
        let mut bigram_t = vec![0.0f32; v * v];
        for u in 0..v {
            for w in 0..v {
                bigram_t[w * v + u] = bigram[u * v + w];
            }
        }
        ToyLm {
            vocab_size,
            backward_weight,
            unigram,
            bigram,
            bigram_t,
        }
    }

    #[inline]
    pub fn vocab_size(&self) -> u32 {
        self.vocab_size
    }

    #[inline]
    pub fn backward_weight(&self) -> f32 {
        self.backward_weight
    }

    #[inline]
    pub fn unigram(&self) -> &[f32] {
        &self.unigram
    }

    /// Row `u` of the bigram table: logits of each token following `u`.
    #[inline]
    pub fn bigram_row(&self, u: TokenId) -> &[f32] {
        let v = self.vocab_size as usize;
        &self.bigram[u.index() * v..(u.index() + 1) * v]
    }

    /// Column `w` of the bigram table: logits of `w` following each token.
    #[inline]
    fn bigram_col(&self, w: TokenId) -> &[f32] {
        let v = self.vocab_size as usize;
        &self.bigram_t[w.index() * v..(w.index() + 1) * v]
    }

    /// Assemble the logit row for a position with the given neighbors:
    /// unigram, plus the bigram row of the left token when present, plus
    /// `backward_weight` times the bigram column of the right token when
    /// present.
    pub fn row_into(&self, left: Option<TokenId>, right: Option<TokenId>, out: &mut [f32]) {
        debug_assert_eq!(out.len(), self.vocab_size as usize);
        out.copy_from_slice(&self.unigram);
        if let Some(u) = left {
            for (o, b) in out.iter_mut().zip(self.bigram_row(u)) {
                *o += *b;
            }
        }
        if let Some(w) = right {
            let bw = self.backward_weight;
            for (o, b) in out.iter_mut().zip(self.bigram_col(w)) {
                *o += bw * *b;
            }
        }
    }

    /// Forward conditional logit of `v` given `left`, widened to f64 so the
    /// likelihood path is consistent with [`ToyLm::forward_log_z`].
    #[inline]
    pub fn forward_logit(&self, left: Option<TokenId>, v: TokenId) -> f64 {
        match left {
            Some(u) => self.unigram[v.index()] as f64 + self.bigram_row(u)[v.index()] as f64,
            None => self.unigram[v.index()] as f64,
        }
    }

    /// Log-probability of `v` under the forward factorization, i.e. the
    /// softmax of `unigram` (no left context) or `unigram + bigram[left]`.
    pub fn forward_log_prob(&self, left: Option<TokenId>, v: TokenId) -> f64 {
        self.forward_logit(left, v) - self.forward_log_z(left)
    }

    /// Log normalizer of the forward conditional row.
    pub fn forward_log_z(&self, left: Option<TokenId>) -> f64 {
        let v = self.vocab_size as usize;
        let mut max = f64::NEG_INFINITY;
        for i in 0..v {
            max = max.max(self.forward_logit(left, TokenId(i as u32)));
        }
        let mut sum = 0.0f64;
        for i in 0..v {
            sum += (self.forward_logit(left, TokenId(i as u32)) - max).exp();
        }
        max + sum.ln()
    }

    /// Text header `"<vocab_size> <backward_weight>"`, then the unigram and
    /// bigram tables as little-endian f32, in that order.
    pub fn save(&self, path: &Path) -> Result<(), ToyModelError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "{} {}", self.vocab_size, self.backward_weight)?;
        for x in self.unigram.iter().chain(self.bigram.iter()) {
            f.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ToyModelError> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut header = String::new();
        f.read_line(&mut header)?;
        let mut parts = header.split_whitespace();
        let bad = |what: &str| ToyModelError::MalformedFile(format!("bad header: {what}"));
        let vocab_size: u32 = parts
            .next()
            .ok_or_else(|| bad("missing vocab size"))?
            .parse()
            .map_err(|_| bad("vocab size"))?;
        let backward_weight: f32 = parts
            .next()
            .ok_or_else(|| bad("missing backward weight"))?
            .parse()
            .map_err(|_| bad("backward weight"))?;
        if parts.next().is_some() {
            return Err(bad("trailing fields"));
        }
        let v = vocab_size as usize;
        let mut read_table = |len: usize| -> Result<Vec<f32>, ToyModelError> {
            let mut out = Vec::with_capacity(len);
            let mut b = [0u8; 4];
            for _ in 0..len {
                f.read_exact(&mut b)?;
                out.push(f32::from_le_bytes(b));
            }
            Ok(out)
        };
        let unigram = read_table(v)?;
        let bigram = read_table(v * v)?;
        if f.read(&mut [0u8; 1])? != 0 {
            return Err(ToyModelError::MalformedFile("trailing bytes".into()));
        }
        Self::from_tables(vocab_size, backward_weight, unigram, bigram)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_is_reproducible() {
        let a = ToyLm::random(32, 7, 0.5);
        let b = ToyLm::random(32, 7, 0.5);
        assert_eq!(a.unigram, b.unigram);
        assert_eq!(a.bigram, b.bigram);
        let c = ToyLm::random(32, 8, 0.5);
        assert_ne!(a.bigram, c.bigram);
    }

    #[test]
    fn row_assembly_three_terms() {
        // |V|=8 with formulaic tables; expected values written out by hand.
        let v = 8usize;
        let unigram: Vec<f32> = (0..v).map(|i| i as f32 * 0.5).collect();
        let bigram: Vec<f32> = (0..v * v).map(|i| (i % 5) as f32 * 0.25).collect();
        let m = ToyLm::from_tables(8, 0.5, unigram.clone(), bigram.clone()).unwrap();

        let mut row = vec![0.0f32; v];
        m.row_into(None, None, &mut row);
        assert_eq!(row, unigram);

        m.row_into(Some(TokenId(3)), Some(TokenId(2)), &mut row);
        for t in 0..v {
            let expect = unigram[t] + bigram[3 * v + t] + 0.5 * bigram[t * v + 2];
            assert_eq!(row[t], expect, "token {t}");
        }
    }

    #[test]
    fn transpose_is_consistent() {
        let m = ToyLm::random(16, 3, 1.0);
        for u in 0..16u32 {
            for w in 0..16u32 {
                assert_eq!(
                    m.bigram_row(TokenId(u))[w as usize],
                    m.bigram_col(TokenId(w))[u as usize]
                );
            }
        }
    }

    #[test]
    fn forward_log_prob_normalizes() {
        let m = ToyLm::random(64, 11, 0.5);
        for left in [None, Some(TokenId(5))] {
            let total: f64 = (0..64)
                .map(|t| m.forward_log_prob(left, TokenId(t)).exp())
                .sum();
            assert!((total - 1.0).abs() < 1e-9, "total {total}");
        }
    }

    #[test]
    fn save_load_roundtrip() {
        let m = ToyLm::random(24, 99, 0.25);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        m.save(&path).unwrap();
        let back = ToyLm::load(&path).unwrap();
        assert_eq!(m.vocab_size, back.vocab_size);
        assert_eq!(m.backward_weight, back.backward_weight);
        assert_eq!(m.unigram, back.unigram);
        assert_eq!(m.bigram, back.bigram);
    }

    #[test]
    fn from_tables_rejects_bad_input() {
        assert!(ToyLm::from_tables(4, 0.5, vec![0.0; 3], vec![0.0; 16]).is_err());
        assert!(ToyLm::from_tables(4, 0.5, vec![0.0; 4], vec![0.0; 15]).is_err());
        assert!(ToyLm::from_tables(4, 1.5, vec![0.0; 4], vec![0.0; 16]).is_err());
        assert!(ToyLm::from_tables(4, 0.5, vec![f32::NAN; 4], vec![0.0; 16]).is_err());
    }
}
