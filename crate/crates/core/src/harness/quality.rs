//! Relative text-quality proxy: mean negative log-likelihood under the toy
//! model's own forward bigram factorization. Meaningful only for comparing
//! corpora from the same model.

use rayon::prelude::*;

use crate::partition::TokenId;
use crate::toy::ToyLm;

/// Mean NLL of `tokens`: the first token scored against the unigram
/// distribution, each later token against the row conditioned on its
/// predecessor. Input must be nonempty.
pub fn quality_proxy(model: &ToyLm, tokens: &[TokenId]) -> f64 {
    assert!(!tokens.is_empty(), "quality proxy needs at least one token");
    let mut nll = 0.0;
    for (i, &tok) in tokens.iter().enumerate() {
        let left = if i == 0 { None } else { Some(tokens[i - 1]) };
        nll -= model.forward_log_prob(left, tok);
    }
    nll / tokens.len() as f64
}

/// Same quantity with the per-context log-normalizers precomputed once, for
/// scoring whole corpora.
pub struct QualityScorer<'m> {
    model: &'m ToyLm,
    log_z_unigram: f64,
    log_z_rows: Vec<f64>,
}

impl<'m> QualityScorer<'m> {
    pub fn new(model: &'m ToyLm) -> Self {
        let v = model.vocab_size();
        let log_z_rows: Vec<f64> = (0..v)
            .into_par_iter()
            .map(|u| model.forward_log_z(Some(TokenId(u))))
            .collect();
        QualityScorer {
            model,
            log_z_unigram: model.forward_log_z(None),
            log_z_rows,
        }
    }

    pub fn nll(&self, tokens: &[TokenId]) -> f64 {
        assert!(!tokens.is_empty(), "quality proxy needs at least one token");
        let mut nll = 0.0;
        for (i, &tok) in tokens.iter().enumerate() {
            let left = if i == 0 { None } else { Some(tokens[i - 1]) };
            let log_z = match left {
                Some(u) => self.log_z_rows[u.index()],
                None => self.log_z_unigram,
            };
            nll -= self.model.forward_logit(left, tok) - log_z;
        }
        nll / tokens.len() as f64
    }

    pub fn mean_nll(&self, corpus: &[Vec<TokenId>]) -> f64 {
        assert!(!corpus.is_empty(), "empty corpus");
        corpus.iter().map(|t| self.nll(t)).sum::<f64>() / corpus.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_token_is_unigram_nll() {
        let m = ToyLm::random(32, 4, 0.5);
        let nll = quality_proxy(&m, &[TokenId(7)]);
        let expect = -m.forward_log_prob(None, TokenId(7));
        assert!((nll - expect).abs() < 1e-12);
    }

    #[test]
    fn scorer_matches_direct_computation() {
        let m = ToyLm::random(48, 9, 0.5);
        let scorer = QualityScorer::new(&m);
        let tokens: Vec<TokenId> = [3u32, 17, 42, 42, 0, 11].iter().map(|&t| TokenId(t)).collect();
        let a = quality_proxy(&m, &tokens);
        let b = scorer.nll(&tokens);
        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }

    #[test]
    fn greedy_sequence_beats_perturbed() {
        // Swapping the final token of a greedy forward chain for a
        // non-argmax token can only raise the NLL (no downstream terms).
        let m = ToyLm::random(64, 2, 0.0);
        let mut greedy = vec![TokenId(5)];
        for _ in 0..20 {
            let u = *greedy.last().unwrap();
            let best = (0..64u32)
                .max_by(|&a, &b| {
                    m.forward_logit(Some(u), TokenId(a))
                        .partial_cmp(&m.forward_logit(Some(u), TokenId(b)))
                        .unwrap()
                })
                .unwrap();
            greedy.push(TokenId(best));
        }
        let base = quality_proxy(&m, &greedy);
        let last = greedy.len() - 1;
        let mut perturbed = greedy.clone();
        perturbed[last] = TokenId((perturbed[last].0 + 1) % 64);
        assert!(quality_proxy(&m, &perturbed) > base);
    }
}
