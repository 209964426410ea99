//! Observation payloads in request strings, resolved against a model's
//! input layout:
//!
//! - `none`: empty vector (models without observations)
//! - `onehot:<k>`: one-hot vector of the model's observation length
//! - `vector:<v0>,<v1>,...`: explicit vector
//! - `image:<base64>`: little-endian f64 pixels, shape taken from the model

use stableflow::dataset::decode_f64_base64;
use stableflow::weightnet::FrontEnd;
use stableflow::{Image, Observation, PolicyParams};

pub fn parse_observation(spec: &str, policy: &PolicyParams) -> Result<Observation, String> {
    let front = &policy.weight_net().config().front_end;
    let (kind, rest) = spec.split_once(':').unwrap_or((spec, ""));
    let obs = match (kind, front) {
        ("none", FrontEnd::Vector { .. }) => Observation::empty(),
        ("onehot", FrontEnd::Vector { d_nc }) => {
            let k: usize = rest.parse().map_err(|_| format!("bad one-hot index `{rest}`"))?;
            Observation::one_hot(*d_nc, k).map_err(|e| e.to_string())?
        }
        ("vector", FrontEnd::Vector { .. }) => {
            let v = if rest.is_empty() {
                Vec::new()
            } else {
                rest.split(',')
                    .map(|s| s.trim().parse::<f64>().map_err(|_| format!("bad number `{s}`")))
                    .collect::<Result<Vec<_>, _>>()?
            };
            Observation::Vector(v)
        }
        ("image", FrontEnd::Conv { height, width, .. }) => {
            let px = decode_f64_base64(rest).map_err(|e| e.to_string())?;
            Observation::Image(Image::new(*height, *width, px).map_err(|e| e.to_string())?)
        }
        ("none" | "onehot" | "vector", FrontEnd::Conv { .. }) => {
            return Err("this model takes image observations".into())
        }
        ("image", FrontEnd::Vector { .. }) => return Err("this model takes vector observations".into()),
        _ => return Err(format!("unknown observation spec `{spec}`")),
    };
    obs.validate().map_err(|e| e.to_string())?;
    Ok(obs)
}

/// The spec a model uses when a request names none: `none` for models
/// without observations, otherwise `onehot:0` or a blank image.
pub fn default_observation(policy: &PolicyParams) -> Observation {
    match &policy.weight_net().config().front_end {
        FrontEnd::Vector { d_nc: 0 } => Observation::empty(),
        FrontEnd::Vector { d_nc } => Observation::one_hot(*d_nc, 0).expect("d_nc >= 1"),
        FrontEnd::Conv { height, width, .. } => {
            Observation::Image(Image::new(*height, *width, vec![0.0; height * width]).expect("valid shape"))
        }
    }
}
