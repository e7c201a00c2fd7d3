//! Versioned JSON checkpoints:
//!
//! ```text
//! {"version":"1","kind":"tabular"|"mlp","reward_range":[lo,hi],"params":{...}}
//! ```
//!
//! Tabular params: `{"default_value":f,"entries":[{"key":"p|g","sum":f,"count":n},...]}`
//! with entries sorted by key.
//!
//! MLP params: `{"feature_map":{"vocab_size":n,"max_length":n,"last_token":b},
//! "layers":[{"rows":r,"cols":c,"weights":[r*c floats, row-major],"bias":[r floats]},...]}`.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::mlp::Layer;
use super::{AnyValue, FeatureMap, MlpValue, TabularValue, ValueError};
use crate::mdp::State;

pub const CHECKPOINT_VERSION: &str = "1";

#[derive(Serialize, Deserialize)]
struct Envelope {
    version: String,
    kind: String,
    reward_range: [f64; 2],
    params: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TabularParams {
    default_value: f64,
    entries: Vec<TabularEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TabularEntry {
    key: String,
    sum: f64,
    count: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MlpParams {
    feature_map: FeatureMap,
    layers: Vec<Layer>,
}

fn malformed(e: impl std::fmt::Display) -> ValueError {
    ValueError::Malformed(e.to_string())
}

impl AnyValue {
    pub fn to_checkpoint_json(&self) -> String {
        let (kind, params) = match self {
            AnyValue::Tabular(t) => {
                let mut entries: Vec<TabularEntry> = t
                    .entries()
                    .map(|(s, sum, count)| TabularEntry {
                        key: s.key(),
                        sum,
                        count,
                    })
                    .collect();
                entries.sort_by(|a, b| a.key.cmp(&b.key));
                let p = TabularParams {
                    default_value: t.default_value(),
                    entries,
                };
                ("tabular", serde_json::to_value(p))
            }
            AnyValue::Mlp(m) => {
                let p = MlpParams {
                    feature_map: m.feature_map().clone(),
                    layers: m.layers().to_vec(),
                };
                ("mlp", serde_json::to_value(p))
            }
        };
        let (lo, hi) = self.reward_range();
        serde_json::to_string(&Envelope {
            version: CHECKPOINT_VERSION.to_string(),
            kind: kind.to_string(),
            reward_range: [lo, hi],
            params: params.expect("checkpoint params serialize"),
        })
        .expect("checkpoint serializes")
    }

    pub fn from_checkpoint_json(bytes: &[u8]) -> Result<Self, ValueError> {
        let env: Envelope = serde_json::from_slice(bytes).map_err(malformed)?;
        if env.version != CHECKPOINT_VERSION {
            return Err(ValueError::FormatMismatch {
                expected: CHECKPOINT_VERSION.to_string(),
                found: env.version,
            });
        }
        let [lo, hi] = env.reward_range;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(malformed(format!("invalid reward_range [{lo}, {hi}]")));
        }
        match env.kind.as_str() {
            "tabular" => {
                let p: TabularParams = serde_json::from_value(env.params).map_err(malformed)?;
                if !p.default_value.is_finite() {
                    return Err(malformed("non-finite default_value"));
                }
                let mut t = TabularValue::with_default((lo, hi), p.default_value);
                for e in p.entries {
                    if !e.sum.is_finite() {
                        return Err(malformed(format!("non-finite sum for {}", e.key)));
                    }
                    let state = State::parse_key(&e.key).map_err(malformed)?;
                    t.set_entry(state, e.sum, e.count);
                }
                Ok(AnyValue::Tabular(t))
            }
            "mlp" => {
                let p: MlpParams = serde_json::from_value(env.params).map_err(malformed)?;
                Ok(AnyValue::Mlp(MlpValue::from_layers(
                    p.feature_map,
                    p.layers,
                    (lo, hi),
                )?))
            }
            other => Err(malformed(format!("unknown kind {other:?}"))),
        }
    }
}

/// Writes a checkpoint atomically (temporary file, fsync, rename).
pub fn save_value(v: &AnyValue, path: impl AsRef<Path>) -> Result<(), ValueError> {
    let path = path.as_ref();
    let io = |source| ValueError::Io {
        path: path.display().to_string(),
        source,
    };
    let tmp = path.with_extension("json.tmp");
    {
        let mut f = fs::File::create(&tmp).map_err(io)?;
        f.write_all(v.to_checkpoint_json().as_bytes()).map_err(io)?;
        f.sync_all().map_err(io)?;
    }
    fs::rename(&tmp, path).map_err(io)
}

pub fn load_value(path: impl AsRef<Path>) -> Result<AnyValue, ValueError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| ValueError::Io {
        path: path.display().to_string(),
        source,
    })?;
    AnyValue::from_checkpoint_json(&bytes)
}
