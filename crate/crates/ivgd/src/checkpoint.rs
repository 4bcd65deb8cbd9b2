//! Text checkpoints: a one-line JSON header describing the
//! architecture, followed by one parameter value per line.
//!
//! Values are written with Rust's shortest-round-trip float formatting
//! and parsed back bit-exactly, so save/load is lossless.

use crate::certify::LipschitzCertificate;
use crate::diffusion::{
    load_forward_params, register_forward_params, ICOperator, PerNodeNet,
    ResidualDiffusionModel,
};
use crate::error::{Error, Result};
use crate::grad::ParamSet;
use crate::graph::ConstraintSpec;
use crate::localizer::{load_head_params, register_head_params, CompensationNet, IVGDModel};
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const FORWARD_FORMAT: &str = "ivgd-forward-checkpoint";
pub const HEAD_FORMAT: &str = "ivgd-localizer-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
struct ParamSpec {
    name: String,
    shape: Vec<usize>,
}

fn specs_of(ps: &ParamSet) -> Vec<ParamSpec> {
    (0..ps.len())
        .map(|i| ParamSpec { name: ps.name(i).to_string(), shape: ps.shape(i).to_vec() })
        .collect()
}

fn render(header_json: String, flat: &[f64]) -> String {
    let mut out = String::with_capacity(header_json.len() + flat.len() * 20);
    out.push_str(&header_json);
    out.push('\n');
    for v in flat {
        out.push_str(&format!("{}\n", v));
    }
    out
}

fn parse_values(lines: &mut std::str::Lines, expected: usize) -> Result<Vec<f64>> {
    let mut flat = Vec::with_capacity(expected);
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let v: f64 = line.trim().parse().map_err(|_| Error::Parse {
            line: i + 2,
            msg: format!("invalid parameter value {:?}", line),
        })?;
        flat.push(v);
    }
    if flat.len() != expected {
        return Err(Error::format(format!(
            "expected {} parameter values, found {}",
            expected,
            flat.len()
        )));
    }
    Ok(flat)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ForwardHeader {
    format: String,
    version: u32,
    hidden: usize,
    spectral_scale: f64,
    t_steps: usize,
    c_g: f64,
    cert_f: Option<LipschitzCertificate>,
    cert_g: Option<LipschitzCertificate>,
    params: Vec<ParamSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    config_hash: Option<String>,
}

#[derive(Debug)]
pub struct SavedForward {
    pub model: ResidualDiffusionModel,
    pub config_hash: Option<String>,
}

pub fn forward_to_string(
    model: &ResidualDiffusionModel,
    config_hash: Option<&str>,
) -> Result<String> {
    let mut ps = ParamSet::new();
    register_forward_params(&model.f, &mut ps)?;
    let header = ForwardHeader {
        format: FORWARD_FORMAT.to_string(),
        version: CHECKPOINT_VERSION,
        hidden: model.f.hidden,
        spectral_scale: model.f.spectral_scale,
        t_steps: model.ic.t_steps,
        c_g: model.ic.c_g,
        cert_f: model.cert_f.clone(),
        cert_g: model.cert_g.clone(),
        params: specs_of(&ps),
        config_hash: config_hash.map(str::to_string),
    };
    let json = serde_json::to_string(&header)
        .map_err(|e| Error::format(format!("cannot encode checkpoint header: {}", e)))?;
    Ok(render(json, &ps.flat_values()))
}

fn check_header(format: &str, version: u32, expected: &str) -> Result<()> {
    if format != expected {
        return Err(Error::format(format!(
            "not a {} file (found format {:?})",
            expected, format
        )));
    }
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(format!(
            "unsupported checkpoint version {} (this build reads {})",
            version, CHECKPOINT_VERSION
        )));
    }
    Ok(())
}

pub fn forward_from_string(text: &str) -> Result<SavedForward> {
    let mut lines = text.lines();
    let head_line = lines
        .next()
        .ok_or_else(|| Error::format("checkpoint file is empty"))?;
    let header: ForwardHeader = serde_json::from_str(head_line)
        .map_err(|e| Error::format(format!("invalid checkpoint header: {}", e)))?;
    check_header(&header.format, header.version, FORWARD_FORMAT)?;
    let mut net = PerNodeNet {
        hidden: header.hidden,
        w1: vec![0.0; header.hidden * 2],
        b1: vec![0.0; header.hidden],
        w2: vec![0.0; header.hidden],
        b2: 0.0,
        spectral_scale: header.spectral_scale,
    };
    let mut ps = ParamSet::new();
    register_forward_params(&net, &mut ps)?;
    if specs_of(&ps) != header.params {
        return Err(Error::format("checkpoint parameter layout does not match"));
    }
    let flat = parse_values(&mut lines, ps.total_params())?;
    ps.set_flat_values(&flat)?;
    load_forward_params(&mut net, &ps)?;
    let model = ResidualDiffusionModel {
        f: net,
        ic: ICOperator { t_steps: header.t_steps, c_g: header.c_g },
        cert_f: header.cert_f,
        cert_g: header.cert_g,
    };
    Ok(SavedForward { model, config_hash: header.config_hash })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct HeadHeader {
    format: String,
    version: u32,
    n: usize,
    hidden: usize,
    k_layers: usize,
    tied: bool,
    threshold: f64,
    constraint: Option<ConstraintSpec>,
    params: Vec<ParamSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    config_hash: Option<String>,
}

#[derive(Debug)]
pub struct SavedHead {
    pub model: IVGDModel,
    pub config_hash: Option<String>,
}

/// Serializes the head only; the diffusion model keeps its own file.
pub fn head_to_string(model: &IVGDModel, config_hash: Option<&str>) -> Result<String> {
    let mut ps = ParamSet::new();
    register_head_params(model, true, &mut ps)?;
    let header = HeadHeader {
        format: HEAD_FORMAT.to_string(),
        version: CHECKPOINT_VERSION,
        n: model.n(),
        hidden: model.comp.hidden,
        k_layers: model.layers.len(),
        tied: model.layer_nets.is_none(),
        threshold: model.threshold,
        constraint: model.constraint.clone(),
        params: specs_of(&ps),
        config_hash: config_hash.map(str::to_string),
    };
    let json = serde_json::to_string(&header)
        .map_err(|e| Error::format(format!("cannot encode checkpoint header: {}", e)))?;
    Ok(render(json, &ps.flat_values()))
}

/// Rebuilds a head checkpoint around an already-loaded diffusion model.
pub fn head_from_string(text: &str, diffusion: ResidualDiffusionModel) -> Result<SavedHead> {
    let mut lines = text.lines();
    let head_line = lines
        .next()
        .ok_or_else(|| Error::format("checkpoint file is empty"))?;
    let header: HeadHeader = serde_json::from_str(head_line)
        .map_err(|e| Error::format(format!("invalid checkpoint header: {}", e)))?;
    check_header(&header.format, header.version, HEAD_FORMAT)?;
    let mut model = IVGDModel {
        diffusion,
        comp: CompensationNet::zeros(header.n, header.hidden),
        layers: vec![crate::localizer::ValidityLayer::init_default(); header.k_layers],
        layer_nets: (!header.tied).then(|| {
            (0..header.k_layers)
                .map(|_| CompensationNet::zeros(header.n, header.hidden))
                .collect()
        }),
        constraint: header.constraint,
        threshold: header.threshold,
    };
    let mut ps = ParamSet::new();
    register_head_params(&model, true, &mut ps)?;
    if specs_of(&ps) != header.params {
        return Err(Error::format("checkpoint parameter layout does not match"));
    }
    let flat = parse_values(&mut lines, ps.total_params())?;
    ps.set_flat_values(&flat)?;
    load_head_params(&mut model, &ps)?;
    Ok(SavedHead { model, config_hash: header.config_hash })
}

pub fn save_forward(
    model: &ResidualDiffusionModel,
    config_hash: Option<&str>,
    path: &Path,
) -> Result<()> {
    std::fs::write(path, forward_to_string(model, config_hash)?)?;
    Ok(())
}

pub fn load_forward(path: &Path) -> Result<SavedForward> {
    forward_from_string(&std::fs::read_to_string(path)?)
}

pub fn save_head(model: &IVGDModel, config_hash: Option<&str>, path: &Path) -> Result<()> {
    std::fs::write(path, head_to_string(model, config_hash)?)?;
    Ok(())
}

pub fn load_head(path: &Path, diffusion: ResidualDiffusionModel) -> Result<SavedHead> {
    head_from_string(&std::fs::read_to_string(path)?, diffusion)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::certify::{certify_lipschitz, CertifyConfig};
    use crate::diffusion::f_forward;
    use crate::graph::{generate_graph, GraphKind, ProbRule};

    fn sample_forward() -> ResidualDiffusionModel {
        let g = generate_graph(
            GraphKind::ErdosRenyi { n: 7, p_edge: 0.4, seed: 2 },
            ProbRule::WeightedCascade,
        )
        .unwrap();
        let net = PerNodeNet::random(6, 0.9, 5).unwrap();
        let cert = certify_lipschitz(
            "f_forward",
            &|x| f_forward(&net, &g, x).unwrap(),
            7,
            &CertifyConfig::default(),
        )
        .unwrap();
        let mut m = ResidualDiffusionModel::new(net, ICOperator { t_steps: 3, c_g: 0.871 });
        m.cert_f = Some(cert);
        m
    }

    #[test]
    fn forward_round_trip_is_bit_exact() {
        let model = sample_forward();
        let text = forward_to_string(&model, Some("abc123")).unwrap();
        let back = forward_from_string(&text).unwrap();
        assert_eq!(back.config_hash.as_deref(), Some("abc123"));
        assert_eq!(back.model.f, model.f);
        assert_eq!(back.model.ic, model.ic);
        let cert = back.model.cert_f.as_ref().unwrap();
        assert_eq!(
            cert.estimate.to_bits(),
            model.cert_f.as_ref().unwrap().estimate.to_bits()
        );
        assert!(back.model.cert_g.is_none());
        // Saving the reload gives the identical byte stream.
        let again = forward_to_string(&back.model, Some("abc123")).unwrap();
        assert_eq!(text, again);
    }

    #[test]
    fn head_round_trip_preserves_every_parameter() {
        let mut model = IVGDModel::new(sample_forward(), 7, 5, 3, 8).unwrap();
        model.constraint = Some(ConstraintSpec::uniform(7, 2.0));
        model.layers[1].s_rho = -4.2;
        let text = head_to_string(&model, None).unwrap();
        let back = head_from_string(&text, sample_forward()).unwrap().model;
        assert_eq!(back.comp, model.comp);
        assert_eq!(back.layers, model.layers);
        assert_eq!(back.constraint, model.constraint);
        assert_eq!(back.threshold, model.threshold);
        assert!(back.layer_nets.is_none());
    }

    #[test]
    fn untied_head_round_trips_too() {
        let mut model = IVGDModel::new(sample_forward(), 4, 3, 2, 8).unwrap();
        model.untie_layers(99);
        let text = head_to_string(&model, None).unwrap();
        let back = head_from_string(&text, sample_forward()).unwrap().model;
        assert_eq!(back.layer_nets, model.layer_nets);
    }

    #[test]
    fn wrong_format_and_version_are_rejected() {
        let model = sample_forward();
        let text = forward_to_string(&model, None).unwrap();
        let err = head_from_string(&text, sample_forward()).unwrap_err();
        assert!(matches!(err, Error::Format(_)));
        let bumped = text.replacen("\"version\":1", "\"version\":9", 1);
        assert!(matches!(forward_from_string(&bumped).unwrap_err(), Error::Format(_)));
        assert!(matches!(forward_from_string("").unwrap_err(), Error::Format(_)));
    }

    #[test]
    fn truncated_and_corrupt_bodies_are_reported() {
        let model = sample_forward();
        let text = forward_to_string(&model, None).unwrap();
        let mut lines: Vec<&str> = text.lines().collect();
        lines.pop();
        let truncated = lines.join("\n");
        assert!(matches!(forward_from_string(&truncated).unwrap_err(), Error::Format(_)));
        let corrupt = text.replacen("\n", "\nnot-a-number\n", 1);
        match forward_from_string(&corrupt).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("expected a parse error, got {:?}", other),
        }
    }

    #[test]
    fn files_round_trip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let model = sample_forward();
        let path = dir.path().join("forward.ckpt");
        save_forward(&model, Some("h"), &path).unwrap();
        let back = load_forward(&path).unwrap();
        assert_eq!(back.model.f, model.f);
        let head = IVGDModel::new(sample_forward(), 7, 4, 2, 3).unwrap();
        let hpath = dir.path().join("head.ckpt");
        save_head(&head, None, &hpath).unwrap();
        let hback = load_head(&hpath, sample_forward()).unwrap();
        assert_eq!(hback.model.comp, head.comp);
    }
}
