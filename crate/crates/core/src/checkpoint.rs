//! Checkpoint files: versioned JSON with every policy double stored as the
//! 16 hex digits of its IEEE-754 bit pattern, so reloads are bit-exact.
//!
//! Field order (version 1):
//!
//! ```text
//! format           "stableflow-checkpoint"
//! version          1
//! config           TrainConfig (plain JSON)
//! policy.d_c       integer
//! policy.diag_floor           hex f64
//! policy.attractor            hex f64 array
//! policy.systems[].l_raw      hex f64 array, row-major d_c×d_c
//! policy.systems[].c          hex f64 array, row-major d_c×d_c
//! policy.systems[].bypass_a   optional hex f64 array (test hook)
//! policy.weight_net.config    WeightNetConfig (plain JSON)
//! policy.weight_net.blocks    list of hex f64 arrays
//! meta.final_loss             hex f64
//! meta.epochs                 integer
//! meta.loss_history           hex f64 array
//! meta.dataset_fingerprint    sha256 hex
//! meta.demo_dt               hex f64, sampling step of the training demos
//! ```
//!
//! A hex array is one string of concatenated 16-digit big-endian words.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::policy::{ElementaryDs, PolicyParams};
use crate::trainer::TrainConfig;
use crate::weightnet::{WeightNetConfig, WeightNetParams};

pub const FORMAT_TAG: &str = "stableflow-checkpoint";
pub const CHECKPOINT_VERSION: u64 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingMeta {
    pub final_loss: f64,
    pub epochs: usize,
    pub loss_history: Vec<f64>,
    pub dataset_fingerprint: String,
    /// Sampling step of the training demos; the default rollout step.
    pub demo_dt: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub policy: PolicyParams,
    pub meta: TrainingMeta,
}

pub fn encode_hex(values: &[f64]) -> String {
    values.iter().map(|v| format!("{:016x}", v.to_bits())).collect()
}

pub fn decode_hex(s: &str) -> Result<Vec<f64>> {
    if s.len() % 16 != 0 || !s.is_ascii() {
        return Err(Error::Parse(format!(
            "hex array of length {} is not a whole number of 16-digit words",
            s.len()
        )));
    }
    (0..s.len() / 16)
        .map(|i| {
            u64::from_str_radix(&s[16 * i..16 * (i + 1)], 16)
                .map(f64::from_bits)
                .map_err(|e| Error::Parse(format!("bad hex word {i}: {e}")))
        })
        .collect()
}

fn decode_one(s: &str, what: &str) -> Result<f64> {
    match decode_hex(s)?.as_slice() {
        [v] => Ok(*v),
        other => Err(Error::Parse(format!("{what}: expected one value, got {}", other.len()))),
    }
}

#[derive(Serialize, Deserialize)]
struct VersionProbe {
    format: String,
    version: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    format: String,
    version: u64,
    config: TrainConfig,
    policy: PolicyFile,
    meta: MetaFile,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PolicyFile {
    d_c: usize,
    diag_floor: String,
    attractor: String,
    systems: Vec<SystemFile>,
    weight_net: NetFile,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SystemFile {
    l_raw: String,
    c: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bypass_a: Option<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NetFile {
    config: WeightNetConfig,
    blocks: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MetaFile {
    final_loss: String,
    epochs: usize,
    loss_history: String,
    dataset_fingerprint: String,
    demo_dt: String,
}

/// Policy parameters alone, in the checkpoint encoding.
pub fn policy_to_json_value(policy: &PolicyParams) -> serde_json::Value {
    serde_json::to_value(policy_file(policy)).expect("plain data")
}

fn policy_file(p: &PolicyParams) -> PolicyFile {
    PolicyFile {
        d_c: p.d_c(),
        diag_floor: encode_hex(&[p.diag_floor()]),
        attractor: encode_hex(p.attractor()),
        systems: p
            .systems()
            .iter()
            .map(|s| SystemFile {
                l_raw: encode_hex(s.l_raw().as_slice()),
                c: encode_hex(s.c().as_slice()),
                bypass_a: s.bypass().map(|a| encode_hex(a.as_slice())),
            })
            .collect(),
        weight_net: NetFile {
            config: p.weight_net().config().clone(),
            blocks: p.weight_net().blocks().iter().map(|b| encode_hex(b)).collect(),
        },
    }
}

fn policy_from_file(f: PolicyFile) -> Result<PolicyParams> {
    let d = f.d_c;
    let square = |s: &str, what: &str| -> Result<Matrix> {
        Matrix::from_row_major(d, d, decode_hex(s)?)
            .map_err(|e| Error::Parse(format!("{what}: {e}")))
    };
    let systems = f
        .systems
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let sys = ElementaryDs::new(square(&s.l_raw, "l_raw")?, square(&s.c, "c")?)
                .map_err(|e| Error::Parse(format!("system {i}: {e}")))?;
            match &s.bypass_a {
                Some(a) => sys.with_bypass(square(a, "bypass_a")?),
                None => Ok(sys),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let blocks = f
        .weight_net
        .blocks
        .iter()
        .map(|b| decode_hex(b))
        .collect::<Result<Vec<_>>>()?;
    let net = WeightNetParams::from_blocks(f.weight_net.config, blocks)?;
    PolicyParams::new(
        systems,
        net,
        decode_hex(&f.attractor)?,
        decode_one(&f.diag_floor, "diag_floor")?,
    )
}

impl Checkpoint {
    pub fn to_json(&self) -> String {
        let file = CheckpointFile {
            format: FORMAT_TAG.into(),
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            policy: policy_file(&self.policy),
            meta: MetaFile {
                final_loss: encode_hex(&[self.meta.final_loss]),
                epochs: self.meta.epochs,
                loss_history: encode_hex(&self.meta.loss_history),
                dataset_fingerprint: self.meta.dataset_fingerprint.clone(),
                demo_dt: encode_hex(&[self.meta.demo_dt]),
            },
        };
        serde_json::to_string_pretty(&file).expect("plain data")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        // Check the version before the full schema so old files get a
        // version error rather than a field error.
        let probe: VersionProbe = serde_json::from_str(text)
            .map_err(|e| Error::Parse(format!("not a checkpoint: {e}")))?;
        if probe.format != FORMAT_TAG {
            return Err(Error::Parse(format!("unexpected format tag `{}`", probe.format)));
        }
        if probe.version != CHECKPOINT_VERSION {
            return Err(Error::UnsupportedVersion {
                found: probe.version,
                supported: CHECKPOINT_VERSION,
            });
        }
        let de = &mut serde_json::Deserializer::from_str(text);
        let file: CheckpointFile = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::Parse(format!("at `{path}`: {}", e.into_inner()))
        })?;
        file.config.validate()?;
        Ok(Self {
            config: file.config,
            policy: policy_from_file(file.policy)?,
            meta: TrainingMeta {
                final_loss: decode_one(&file.meta.final_loss, "final_loss")?,
                epochs: file.meta.epochs,
                loss_history: decode_hex(&file.meta.loss_history)?,
                dataset_fingerprint: file.meta.dataset_fingerprint,
                demo_dt: decode_one(&file.meta.demo_dt, "demo_dt")?,
            },
        })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, ckpt.to_json())?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::from_json(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Dataset, Trajectory};
    use crate::state::StateVector;
    use crate::trainer::{train, NetSpec};

    fn small_checkpoint() -> Checkpoint {
        let states = (0..10)
            .map(|i| StateVector::controllable_only(vec![(i as f64 * 0.3).sin(), i as f64 * 0.1]).unwrap())
            .collect();
        let ds = Dataset::new(vec![Trajectory::new(0.1, states).unwrap()]).unwrap();
        let cfg = TrainConfig {
            n_systems: 2,
            epochs: 3,
            learning_rate: 0.05,
            net: Some(NetSpec::Mlp { hidden: vec![4] }),
            ..TrainConfig::default()
        };
        train(&ds, &cfg).unwrap()
    }

    #[test]
    fn hex_preserves_special_values() {
        let v = [0.0, -0.0, 1.0 / 3.0, f64::MIN_POSITIVE, 5e-324, f64::MAX, -1e300];
        let back = decode_hex(&encode_hex(&v)).unwrap();
        assert!(v.iter().zip(&back).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(decode_hex("abc").is_err());
        assert!(decode_hex("zzzzzzzzzzzzzzzz").is_err());
    }

    #[test]
    fn round_trip_is_exact() {
        let ck = small_checkpoint();
        let back = Checkpoint::from_json(&ck.to_json()).unwrap();
        assert_eq!(back, ck);
        let x = StateVector::controllable_only(vec![0.3, -0.7]).unwrap();
        let a = crate::policy_eval(&ck.policy, &x).unwrap();
        let b = crate::policy_eval(&back.policy, &x).unwrap();
        assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn truncated_file_is_a_parse_error() {
        let json = small_checkpoint().to_json();
        let err = Checkpoint::from_json(&json[..json.len() / 2]).unwrap_err();
        assert!(matches!(err, Error::Parse(_)), "{err}");
    }

    #[test]
    fn version_zero_is_unsupported() {
        let json = small_checkpoint().to_json().replacen("\"version\": 1", "\"version\": 0", 1);
        let err = Checkpoint::from_json(&json).unwrap_err();
        assert!(matches!(err, Error::UnsupportedVersion { found: 0, supported: 1 }));
    }

    #[test]
    fn bypass_survives_round_trip() {
        let ck = small_checkpoint();
        let mut systems = ck.policy.systems().to_vec();
        systems[0] = systems[0].clone().with_bypass(Matrix::identity(2).scale(-1.0)).unwrap();
        let tampered = Checkpoint {
            policy: ck.policy.with_systems(systems).unwrap(),
            ..ck
        };
        let back = Checkpoint::from_json(&tampered.to_json()).unwrap();
        assert!(!crate::verify_certificate(&back.policy).unwrap().verdict);
    }
}
