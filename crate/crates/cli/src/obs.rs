//! `--obs` arguments:
//!
//! - `static:<payload>` sets the observation for the whole rollout
//! - `switch:<t>:<payload>` replaces it from time `t` on
//!
//! with payloads `none`, `onehot:<k>`, `vector:<v0>,<v1>,...` or
//! `image:<png path>` (grayscale, scaled to [0,1]).

use std::path::{Path, PathBuf};

use stableflow::weightnet::FrontEnd;
use stableflow::{Image, Observation, PolicyParams};

use crate::exit::CliError;

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    None,
    OneHot(usize),
    Vector(Vec<f64>),
    Image(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub enum ObsArg {
    Static(Payload),
    Switch(f64, Payload),
}

fn payload(s: &str) -> Result<Payload, String> {
    let (kind, rest) = s.split_once(':').unwrap_or((s, ""));
    match kind {
        "none" if rest.is_empty() => Ok(Payload::None),
        "onehot" => rest.parse().map(Payload::OneHot).map_err(|_| format!("bad one-hot index `{rest}`")),
        "vector" => rest
            .split(',')
            .map(|v| v.trim().parse::<f64>().map_err(|_| format!("bad number `{v}`")))
            .collect::<Result<_, _>>()
            .map(Payload::Vector),
        "image" if !rest.is_empty() => Ok(Payload::Image(PathBuf::from(rest))),
        _ => Err(format!("unknown observation payload `{s}`")),
    }
}

impl std::str::FromStr for ObsArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if let Some(rest) = s.strip_prefix("static:") {
            return payload(rest).map(ObsArg::Static);
        }
        if let Some(rest) = s.strip_prefix("switch:") {
            let (t, p) = rest.split_once(':').ok_or_else(|| format!("expected switch:<t>:<payload>, got `{s}`"))?;
            let t: f64 = t.parse().map_err(|_| format!("bad switch time `{t}`"))?;
            if !(t >= 0.0 && t.is_finite()) {
                return Err(format!("switch time must be >= 0, got {t}"));
            }
            return Ok(ObsArg::Switch(t, payload(p)?));
        }
        Err(format!("expected static:<payload> or switch:<t>:<payload>, got `{s}`"))
    }
}

pub fn load_png(path: &Path) -> Result<Image, CliError> {
    let img = image::open(path)
        .map_err(|e| CliError::io(&format!("reading {}", path.display()), e))?
        .into_luma8();
    let (w, h) = img.dimensions();
    let px = img.pixels().map(|p| f64::from(p.0[0]) / 255.0).collect();
    Ok(Image::new(h as usize, w as usize, px)?)
}

pub fn save_png(image: &Image, path: &Path) -> Result<(), CliError> {
    let px = image.pixels().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let buf = image::GrayImage::from_raw(image.width() as u32, image.height() as u32, px)
        .expect("buffer matches image shape");
    buf.save(path).map_err(|e| CliError::io(&format!("writing {}", path.display()), e))
}

/// The observation a payload denotes for this policy's input layout.
pub fn resolve(p: &Payload, policy: &PolicyParams) -> Result<Observation, CliError> {
    let front = &policy.weight_net().config().front_end;
    let obs = match (p, front) {
        (Payload::None, FrontEnd::Vector { .. }) => Observation::empty(),
        (Payload::OneHot(k), FrontEnd::Vector { d_nc }) => Observation::one_hot(*d_nc, *k)?,
        (Payload::Vector(v), FrontEnd::Vector { .. }) => Observation::Vector(v.clone()),
        (Payload::Image(path), FrontEnd::Conv { .. }) => Observation::Image(load_png(path)?),
        (Payload::Image(_), _) => return Err(CliError::invalid("this policy takes vector observations")),
        (_, _) => return Err(CliError::invalid("this policy takes image observations")),
    };
    obs.validate()?;
    Ok(obs)
}

/// Observation used when none is given: empty, the first one-hot task, or a
/// blank image.
pub fn default_observation(policy: &PolicyParams) -> Observation {
    match &policy.weight_net().config().front_end {
        FrontEnd::Vector { d_nc: 0 } => Observation::empty(),
        FrontEnd::Vector { d_nc } => Observation::one_hot(*d_nc, 0).expect("d_nc >= 1"),
        FrontEnd::Conv { height, width, .. } => {
            Observation::Image(Image::new(*height, *width, vec![0.0; height * width]).expect("valid shape"))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grammar() {
        assert_eq!("static:onehot:2".parse(), Ok(ObsArg::Static(Payload::OneHot(2))));
        assert_eq!("static:none".parse(), Ok(ObsArg::Static(Payload::None)));
        assert_eq!("switch:1.5:onehot:0".parse(), Ok(ObsArg::Switch(1.5, Payload::OneHot(0))));
        assert_eq!(
            "switch:1:image:/tmp/a.png".parse(),
            Ok(ObsArg::Switch(1.0, Payload::Image("/tmp/a.png".into())))
        );
        assert_eq!("static:vector:1,0.5".parse(), Ok(ObsArg::Static(Payload::Vector(vec![1.0, 0.5]))));
        for bad in ["onehot:1", "static:onehot:x", "switch:-1:onehot:0", "switch:onehot:0", "static:image:", "static:blob"] {
            assert!(bad.parse::<ObsArg>().is_err(), "{bad}");
        }
    }

    #[test]
    fn png_round_trip_quantizes_to_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.png");
        let img = stableflow::fixtures::sign_image(stableflow::fixtures::Shape::Sine, 32).unwrap();
        save_png(&img, &path).unwrap();
        let back = load_png(&path).unwrap();
        assert_eq!(back.shape(), (32, 32));
        for (a, b) in img.pixels().iter().zip(back.pixels()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }
}
