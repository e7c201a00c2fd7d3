use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::{check_state, temper, NextTokenDistribution, PolicyBackend, PolicyError};
use crate::mdp::{State, Vocabulary};

/// Explicit per-state next-token rows with a uniform fallback for states not
/// in the table.
#[derive(Clone, Debug)]
pub struct TabularPolicy {
    vocab: Vocabulary,
    table: HashMap<State, Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TabularFile {
    rows: BTreeMap<String, Vec<f64>>,
}

impl TabularPolicy {
    pub fn new(vocab: Vocabulary) -> Self {
        Self {
            vocab,
            table: HashMap::new(),
        }
    }

    pub fn insert(&mut self, state: State, row: Vec<f64>) -> Result<(), PolicyError> {
        self.vocab.check_all(state.prompt())?;
        self.vocab.check_all(state.generated())?;
        NextTokenDistribution::dense(row.clone())?.validate(self.vocab.size())?;
        self.table.insert(state, row);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    /// Parses `{"rows": {"<state key>": [p0, p1, ...], ...}}`.
    pub fn from_json(vocab: Vocabulary, text: &str) -> Result<Self, PolicyError> {
        let file: TabularFile = serde_json::from_str(text).map_err(|e| {
            PolicyError::InvalidParameter(format!("tabular policy file: {e}"))
        })?;
        let mut policy = TabularPolicy::new(vocab);
        for (key, row) in file.rows {
            policy.insert(State::parse_key(&key)?, row)?;
        }
        Ok(policy)
    }

    pub fn to_json(&self) -> String {
        let rows = self
            .table
            .iter()
            .map(|(s, r)| (s.key(), r.clone()))
            .collect();
        serde_json::to_string(&TabularFile { rows }).expect("serializable")
    }
}

impl PolicyBackend for TabularPolicy {
    fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    fn next_distribution(
        &self,
        state: &State,
        temperature: f64,
    ) -> Result<NextTokenDistribution, PolicyError> {
        check_state(state, &self.vocab)?;
        let row = match self.table.get(state) {
            Some(r) => temper(r, temperature)?,
            None => {
                super::check_temperature(temperature)?;
                vec![1.0 / self.vocab.size() as f64; self.vocab.size()]
            }
        };
        Ok(NextTokenDistribution::Dense(row))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{tokens, TokenId};

    fn policy() -> TabularPolicy {
        let mut p = TabularPolicy::new(Vocabulary::new(3, TokenId(0)).unwrap());
        p.insert(State::new(tokens(&[1])), vec![0.5, 0.3, 0.2]).unwrap();
        p
    }

    #[test]
    fn unit_temperature_returns_row() {
        let d = policy()
            .next_distribution(&State::new(tokens(&[1])), 1.0)
            .unwrap();
        assert_eq!(d, NextTokenDistribution::Dense(vec![0.5, 0.3, 0.2]));
    }

    #[test]
    fn unknown_state_is_uniform() {
        let d = policy()
            .next_distribution(&State::new(tokens(&[2])), 0.7)
            .unwrap();
        assert_eq!(d, NextTokenDistribution::uniform(3));
    }

    #[test]
    fn rejects_bad_rows() {
        let mut p = policy();
        assert!(p.insert(State::new(vec![]), vec![0.5, 0.5]).is_err());
        assert!(p.insert(State::new(vec![]), vec![0.5, 0.4, 0.0]).is_err());
    }

    #[test]
    fn terminal_state_rejected() {
        let s = State::with_generated(tokens(&[1]), tokens(&[0]));
        assert!(matches!(
            policy().next_distribution(&s, 1.0),
            Err(PolicyError::TerminalState(_))
        ));
    }

    #[test]
    fn json_round_trip() {
        let p = policy();
        let q = TabularPolicy::from_json(p.vocab.clone(), &p.to_json()).unwrap();
        let s = State::new(tokens(&[1]));
        assert_eq!(
            p.next_distribution(&s, 0.7).unwrap(),
            q.next_distribution(&s, 0.7).unwrap()
        );
        assert!(TabularPolicy::from_json(p.vocab.clone(), r#"{"rows":{"x":[1.0]}}"#).is_err());
    }
}
