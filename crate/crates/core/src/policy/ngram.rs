use std::collections::HashMap;

use super::{check_state, temper, NextTokenDistribution, PolicyBackend, PolicyError};
use crate::mdp::{State, TokenId, Vocabulary};

/// Additively smoothed n-gram model over the concatenated prompt and
/// generated tokens.
///
/// Contexts are the last `n - 1` tokens; near the start of a sequence the
/// shorter available history is its own context.
#[derive(Clone, Debug)]
pub struct NGramPolicy {
    vocab: Vocabulary,
    order: usize,
    alpha: f64,
    counts: HashMap<Vec<TokenId>, (Vec<u64>, u64)>,
}

impl NGramPolicy {
    pub fn fit(
        vocab: Vocabulary,
        corpus: &[Vec<TokenId>],
        order: usize,
        alpha: f64,
    ) -> Result<Self, PolicyError> {
        if order == 0 {
            return Err(PolicyError::InvalidParameter("n-gram order must be ≥ 1".into()));
        }
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(PolicyError::InvalidParameter(format!(
                "smoothing alpha must be positive, got {alpha}"
            )));
        }
        if corpus.iter().all(|s| s.is_empty()) {
            return Err(PolicyError::EmptyCorpus);
        }
        let v = vocab.size();
        let mut counts: HashMap<Vec<TokenId>, (Vec<u64>, u64)> = HashMap::new();
        for seq in corpus {
            vocab.check_all(seq)?;
            for (i, &tok) in seq.iter().enumerate() {
                let ctx = seq[i.saturating_sub(order - 1)..i].to_vec();
                let entry = counts.entry(ctx).or_insert_with(|| (vec![0; v], 0));
                entry.0[tok.index()] += 1;
                entry.1 += 1;
            }
        }
        Ok(Self {
            vocab,
            order,
            alpha,
            counts,
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    fn context(&self, state: &State) -> Vec<TokenId> {
        let full: Vec<TokenId> = state.full_sequence().collect();
        full[full.len().saturating_sub(self.order - 1)..].to_vec()
    }

    /// `(count(ctx, a) + α) / (count(ctx) + α·|V|)`; unseen contexts are uniform.
    pub fn conditional(&self, context: &[TokenId]) -> Vec<f64> {
        let v = self.vocab.size();
        match self.counts.get(context) {
            Some((row, total)) => {
                let z = *total as f64 + self.alpha * v as f64;
                row.iter().map(|&c| (c as f64 + self.alpha) / z).collect()
            }
            None => vec![1.0 / v as f64; v],
        }
    }
}

impl PolicyBackend for NGramPolicy {
    fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    fn next_distribution(
        &self,
        state: &State,
        temperature: f64,
    ) -> Result<NextTokenDistribution, PolicyError> {
        check_state(state, &self.vocab)?;
        let row = self.conditional(&self.context(state));
        Ok(NextTokenDistribution::Dense(temper(&row, temperature)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::tokens;
    use proptest::prelude::*;

    fn vocab(n: usize) -> Vocabulary {
        Vocabulary::new(n, TokenId(0)).unwrap()
    }

    #[test]
    fn bigram_hand_count() {
        let p = NGramPolicy::fit(vocab(2), &[tokens(&[1, 1, 1])], 2, 1.0).unwrap();
        // Context [1] is followed by 1 twice: (2 + 1) / (2 + 2).
        assert_eq!(p.conditional(&tokens(&[1])), vec![0.25, 0.75]);
        let d = p
            .next_distribution(&State::with_generated(tokens(&[1]), vec![]), 1.0)
            .unwrap();
        assert_eq!(d.prob(TokenId(1)), 0.75);
    }

    #[test]
    fn unseen_context_is_uniform() {
        let p = NGramPolicy::fit(vocab(4), &[tokens(&[1, 2])], 2, 0.5).unwrap();
        assert_eq!(p.conditional(&tokens(&[3])), vec![0.25; 4]);
    }

    #[test]
    fn heavy_smoothing_approaches_uniform() {
        let p = NGramPolicy::fit(vocab(3), &[tokens(&[1, 1, 1, 1, 2])], 2, 1e9).unwrap();
        for x in p.conditional(&tokens(&[1])) {
            assert!((x - 1.0 / 3.0).abs() < 1e-8);
        }
    }

    #[test]
    fn tiny_alpha_reproduces_empirical_conditionals() {
        let corpus = vec![tokens(&[1, 2, 1, 3, 1, 2]), tokens(&[2, 1, 2])];
        let p = NGramPolicy::fit(vocab(4), &corpus, 2, 1e-12).unwrap();
        // After 1: 2 appears three times, 3 once.
        let row = p.conditional(&tokens(&[1]));
        assert!((row[2] - 0.75).abs() < 1e-6);
        assert!((row[3] - 0.25).abs() < 1e-6);
        assert!(row[0] < 1e-6);
    }

    #[test]
    fn unigram_ignores_history() {
        let p = NGramPolicy::fit(vocab(3), &[tokens(&[1, 2, 2, 2])], 1, 1.0).unwrap();
        let a = p.next_distribution(&State::new(tokens(&[1])), 1.0).unwrap();
        let b = p.next_distribution(&State::new(tokens(&[2, 2])), 1.0).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.prob(TokenId(2)), 4.0 / 7.0);
    }

    #[test]
    fn fit_errors() {
        assert!(matches!(
            NGramPolicy::fit(vocab(3), &[vec![]], 2, 1.0),
            Err(PolicyError::EmptyCorpus)
        ));
        assert!(NGramPolicy::fit(vocab(3), &[tokens(&[1])], 0, 1.0).is_err());
        assert!(NGramPolicy::fit(vocab(3), &[tokens(&[1])], 2, 0.0).is_err());
        assert!(NGramPolicy::fit(vocab(3), &[tokens(&[7])], 2, 1.0).is_err());
    }

    proptest! {
        #[test]
        fn rows_normalize(
            corpus in prop::collection::vec(prop::collection::vec(0u32..5, 1..10), 1..6),
            order in 1usize..4,
            alpha in 1e-3f64..10.0,
            ctx in prop::collection::vec(0u32..5, 0..4),
        ) {
            let corpus: Vec<_> = corpus.iter().map(|s| tokens(s)).collect();
            let p = NGramPolicy::fit(vocab(5), &corpus, order, alpha).unwrap();
            let row = p.conditional(&tokens(&ctx));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}
