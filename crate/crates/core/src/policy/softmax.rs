use rand::Rng;

use super::{check_state, check_temperature, seeded_rng, softmax, NextTokenDistribution};
use super::{PolicyBackend, PolicyError};
use crate::mdp::{State, TokenId, Vocabulary};

/// A one-layer softmax network over the previous token:
/// `logits = W[prev] + b`, with a dedicated row for the empty history.
///
/// Logits may be `-inf` to forbid a token outright.
#[derive(Clone, Debug)]
pub struct LinearSoftmaxPolicy {
    vocab: Vocabulary,
    /// `(|V| + 1) x |V|`, row `|V|` is the start-of-sequence context.
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl LinearSoftmaxPolicy {
    pub fn from_parameters(
        vocab: Vocabulary,
        weights: Vec<f64>,
        bias: Vec<f64>,
    ) -> Result<Self, PolicyError> {
        let v = vocab.size();
        if weights.len() != (v + 1) * v || bias.len() != v {
            return Err(PolicyError::InvalidParameter(format!(
                "expected {}x{v} weights and {v} biases",
                v + 1
            )));
        }
        if weights.iter().chain(&bias).any(|x| x.is_nan() || *x == f64::INFINITY) {
            return Err(PolicyError::InvalidParameter("NaN or +inf parameter".into()));
        }
        Ok(Self {
            vocab,
            weights,
            bias,
        })
    }

    /// Random logits with entries uniform in `[-scale, scale]`.
    pub fn random(vocab: Vocabulary, scale: f64, seed: u64) -> Self {
        let v = vocab.size();
        let mut rng = seeded_rng(seed);
        let weights = (0..(v + 1) * v)
            .map(|_| rng.random_range(-scale..=scale))
            .collect();
        Self {
            vocab,
            weights,
            bias: vec![0.0; v],
        }
    }

    /// Sets the bias of `token` to `-inf` so it is never produced.
    pub fn forbid(mut self, token: TokenId) -> Self {
        self.bias[token.index()] = f64::NEG_INFINITY;
        self
    }

    /// Fits by full-batch gradient descent on the mean next-token
    /// cross-entropy over `corpus`.
    pub fn fit(
        vocab: Vocabulary,
        corpus: &[Vec<TokenId>],
        epochs: usize,
        learning_rate: f64,
    ) -> Result<Self, PolicyError> {
        let pairs: Vec<(usize, usize)> = corpus
            .iter()
            .map(|seq| {
                vocab.check_all(seq)?;
                Ok(seq
                    .iter()
                    .enumerate()
                    .map(|(i, t)| {
                        let prev = if i == 0 { vocab.size() } else { seq[i - 1].index() };
                        (prev, t.index())
                    })
                    .collect::<Vec<_>>())
            })
            .collect::<Result<Vec<_>, PolicyError>>()?
            .into_iter()
            .flatten()
            .collect();
        if pairs.is_empty() {
            return Err(PolicyError::EmptyCorpus);
        }
        let v = vocab.size();
        let mut policy = Self {
            weights: vec![0.0; (v + 1) * v],
            bias: vec![0.0; v],
            vocab,
        };
        let n = pairs.len() as f64;
        for _ in 0..epochs {
            let mut gw = vec![0.0; policy.weights.len()];
            let mut gb = vec![0.0; v];
            for &(prev, next) in &pairs {
                let p = softmax(&policy.logits(prev));
                for (a, pa) in p.iter().enumerate() {
                    let g = pa - f64::from(u8::from(a == next));
                    gw[prev * v + a] += g / n;
                    gb[a] += g / n;
                }
            }
            for (w, g) in policy.weights.iter_mut().zip(&gw) {
                *w -= learning_rate * g;
            }
            for (b, g) in policy.bias.iter_mut().zip(&gb) {
                *b -= learning_rate * g;
            }
        }
        Ok(policy)
    }

    fn logits(&self, prev: usize) -> Vec<f64> {
        let v = self.vocab.size();
        self.weights[prev * v..(prev + 1) * v]
            .iter()
            .zip(&self.bias)
            .map(|(w, b)| w + b)
            .collect()
    }

    pub fn mean_cross_entropy(&self, corpus: &[Vec<TokenId>]) -> f64 {
        let mut total = 0.0;
        let mut n = 0usize;
        for seq in corpus {
            for (i, t) in seq.iter().enumerate() {
                let prev = if i == 0 { self.vocab.size() } else { seq[i - 1].index() };
                total -= softmax(&self.logits(prev))[t.index()].ln();
                n += 1;
            }
        }
        total / n as f64
    }
}

impl PolicyBackend for LinearSoftmaxPolicy {
    fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    fn next_distribution(
        &self,
        state: &State,
        temperature: f64,
    ) -> Result<NextTokenDistribution, PolicyError> {
        check_state(state, &self.vocab)?;
        check_temperature(temperature)?;
        let prev = state
            .full_sequence()
            .last()
            .map_or(self.vocab.size(), TokenId::index);
        let scaled: Vec<f64> = self
            .logits(prev)
            .into_iter()
            .map(|l| l / temperature)
            .collect();
        Ok(NextTokenDistribution::Dense(softmax(&scaled)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::tokens;

    fn vocab() -> Vocabulary {
        Vocabulary::new(3, TokenId(0)).unwrap()
    }

    fn with_start_logits(l: [f64; 3]) -> LinearSoftmaxPolicy {
        let mut w = vec![0.0; 12];
        w[9..12].copy_from_slice(&l);
        LinearSoftmaxPolicy::from_parameters(vocab(), w, vec![0.0; 3]).unwrap()
    }

    #[test]
    fn tempered_softmax_of_logits() {
        let p = with_start_logits([2.0, 0.0, 0.0]);
        let NextTokenDistribution::Dense(d) = p.next_distribution(&State::new(vec![]), 0.7).unwrap()
        else {
            panic!()
        };
        assert!((d[0] - 0.896_969_396_331_568_9).abs() < 1e-12);
        assert!((d[1] - 0.051_515_301_834_215_56).abs() < 1e-12);
    }

    #[test]
    fn equal_logits_are_uniform_at_any_temperature() {
        let p = with_start_logits([1.0, 1.0, 1.0]);
        for t in [0.1, 0.7, 1.0, 5.0] {
            let NextTokenDistribution::Dense(d) =
                p.next_distribution(&State::new(vec![]), t).unwrap()
            else {
                panic!()
            };
            assert!(d.iter().all(|x| (x - 1.0 / 3.0).abs() < 1e-15));
        }
    }

    #[test]
    fn forbidden_token_has_zero_mass() {
        let p = LinearSoftmaxPolicy::random(vocab(), 1.0, 3).forbid(TokenId(0));
        let d = p.next_distribution(&State::new(tokens(&[2])), 0.7).unwrap();
        assert_eq!(d.prob(TokenId(0)), 0.0);
        assert!(d.validate(3).is_ok());
    }

    #[test]
    fn fitting_reduces_cross_entropy() {
        let corpus = vec![tokens(&[1, 2, 1, 2, 1, 2, 0]), tokens(&[1, 2, 0])];
        let before = LinearSoftmaxPolicy::fit(vocab(), &corpus, 0, 0.5).unwrap();
        let after = LinearSoftmaxPolicy::fit(vocab(), &corpus, 200, 0.5).unwrap();
        assert!(after.mean_cross_entropy(&corpus) < before.mean_cross_entropy(&corpus) - 0.3);
        let d = after
            .next_distribution(&State::new(tokens(&[1])), 1.0)
            .unwrap();
        assert!(d.prob(TokenId(2)) > 0.8);
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(LinearSoftmaxPolicy::from_parameters(vocab(), vec![0.0; 9], vec![0.0; 3]).is_err());
        assert!(LinearSoftmaxPolicy::fit(vocab(), &[vec![]], 1, 0.1).is_err());
    }
}
