//! Versioned pipeline checkpoints.
//!
//! A checkpoint is a UTF-8 header followed by a binary payload:
//!
//! ```text
//! otlab-checkpoint 1
//! encoder = 784,256,64,4 relu,relu
//! classifier = 4,64,10 relu
//! critic = 4,64,64,1 leaky_relu:0.2,leaky_relu:0.2
//! latent_dim = 4
//! num_classes = 10
//! seed = 1
//! param_count = 218321
//! config.regime = otc
//! ...
//! end-header
//! <param_count little-endian f64 values>
//! ```
//!
//! Parameters are stored network by network (encoder, classifier, critic),
//! each as `W0, b0, W1, b1, ...` in row-major order.

use std::path::Path;

use crate::config::{parse_value, KeyValues};
use crate::error::{Error, Result};
use crate::nets::{Activation, Mlp, MlpSpec, Pipeline};
use crate::tensor::Tensor;
use crate::training::TrainConfig;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "otlab-checkpoint";
const END: &str = "end-header";

/// A loaded checkpoint: the pipeline plus the recorded training settings.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub pipeline: Pipeline,
    pub seed: u64,
    /// Training configuration snapshot, as written.
    pub config: KeyValues,
}

impl Checkpoint {
    /// The snapshot parsed back into a [`TrainConfig`].
    pub fn train_config(&self) -> Result<TrainConfig> {
        let regime = self
            .config
            .get("regime")
            .ok_or_else(|| Error::input("checkpoint has no regime"))?
            .parse()?;
        let mut config = TrainConfig::new(regime, self.seed);
        config.apply(&self.config)?;
        Ok(config)
    }
}

fn spec_line(spec: &MlpSpec) -> String {
    let widths: Vec<String> = spec.widths().iter().map(usize::to_string).collect();
    let acts: Vec<String> = spec
        .activations()
        .iter()
        .map(|a| match a {
            Activation::Relu => "relu".to_string(),
            Activation::LeakyRelu(s) => format!("leaky_relu:{s}"),
        })
        .collect();
    format!("{} {}", widths.join(","), acts.join(","))
}

pub fn encode(pipeline: &Pipeline, config: Option<&TrainConfig>, seed: u64) -> Vec<u8> {
    let nets = [pipeline.encoder(), pipeline.classifier(), pipeline.critic()];
    let count: usize = nets.iter().map(|n| n.param_count()).sum();
    let mut header = format!("{MAGIC} {FORMAT_VERSION}\n");
    for (name, net) in ["encoder", "classifier", "critic"].iter().zip(nets) {
        header.push_str(&format!("{name} = {}\n", spec_line(net.spec())));
    }
    header.push_str(&format!("latent_dim = {}\n", pipeline.latent_dim()));
    header.push_str(&format!(
        "num_classes = {}\n",
        pipeline.classifier().spec().output_width()
    ));
    header.push_str(&format!("seed = {seed}\n"));
    header.push_str(&format!("param_count = {count}\n"));
    if let Some(config) = config {
        for (k, v) in config.to_key_values().iter() {
            header.push_str(&format!("config.{k} = {v}\n"));
        }
    }
    header.push_str(END);
    header.push('\n');

    let mut bytes = header.into_bytes();
    bytes.reserve(8 * count);
    for net in nets {
        for t in net.params() {
            for v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    bytes
}

pub fn save_checkpoint(path: impl AsRef<Path>, pipeline: &Pipeline, config: Option<&TrainConfig>, seed: u64) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode(pipeline, config, seed)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

fn parse_spec(line: &str, path: &Path, offset: u64) -> Result<MlpSpec> {
    let bad = |msg: String| Error::format(path, offset, msg);
    let (widths, acts) = line.split_once(' ').unwrap_or((line, ""));
    let widths: Vec<usize> = widths
        .split(',')
        .map(|w| w.parse().map_err(|_| bad(format!("bad width `{w}`"))))
        .collect::<Result<_>>()?;
    let acts: Vec<Activation> = acts
        .split(',')
        .filter(|a| !a.is_empty())
        .map(|a| match a.split_once(':') {
            None if a == "relu" => Ok(Activation::Relu),
            Some(("leaky_relu", s)) => s
                .parse()
                .map(Activation::LeakyRelu)
                .map_err(|_| bad(format!("bad slope `{s}`"))),
            _ => Err(bad(format!("unknown activation `{a}`"))),
        })
        .collect::<Result<_>>()?;
    MlpSpec::new(widths, acts).map_err(|e| bad(e.to_string()))
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let end_marker = format!("\n{END}\n");
    let header_end = bytes
        .windows(end_marker.len())
        .position(|w| w == end_marker.as_bytes())
        .ok_or_else(|| Error::format(path, 0, "header terminator not found"))?;
    let payload_start = header_end + end_marker.len();
    let header = std::str::from_utf8(&bytes[..header_end])
        .map_err(|e| Error::format(path, e.valid_up_to() as u64, "header is not UTF-8"))?;

    let mut lines = header.lines();
    let first = lines.next().unwrap_or("");
    let version = first
        .strip_prefix(MAGIC)
        .map(str::trim)
        .ok_or_else(|| Error::format(path, 0, "not a checkpoint"))?;
    if version != FORMAT_VERSION.to_string() {
        return Err(Error::format(
            path,
            MAGIC.len() as u64 + 1,
            format!("unsupported format version {version}, expected {FORMAT_VERSION}"),
        ));
    }

    let mut fields = KeyValues::default();
    let mut config = KeyValues::default();
    let mut offset = first.len() as u64 + 1;
    let mut offsets = Vec::new();
    for line in lines {
        let (k, v) = line
            .split_once(" = ")
            .ok_or_else(|| Error::format(path, offset, format!("malformed header line `{line}`")))?;
        match k.strip_prefix("config.") {
            Some(ck) => config.push(ck, v),
            None => {
                fields.push(k, v);
                offsets.push((k.to_string(), offset));
            }
        }
        offset += line.len() as u64 + 1;
    }
    let at = |key: &str| {
        offsets
            .iter()
            .find(|(k, _)| k == key)
            .map_or(0, |(_, o)| *o)
    };
    let field = |key: &str| {
        fields
            .get(key)
            .ok_or_else(|| Error::format(path, offset, format!("missing header field `{key}`")))
    };
    let number = |key: &str| -> Result<u64> {
        parse_value(key, field(key)?).map_err(|_| Error::format(path, at(key), format!("`{key}` is not a number")))
    };

    let specs = ["encoder", "classifier", "critic"]
        .iter()
        .map(|name| parse_spec(field(name)?, path, at(name)))
        .collect::<Result<Vec<_>>>()?;
    let latent_dim = number("latent_dim")? as usize;
    let num_classes = number("num_classes")? as usize;
    let seed = number("seed")?;
    let count = number("param_count")? as usize;

    let (enc, cls, crit) = (&specs[0], &specs[1], &specs[2]);
    if enc.output_width() != latent_dim
        || cls.input_width() != latent_dim
        || crit.input_width() != latent_dim
    {
        return Err(Error::format(
            path,
            at("latent_dim"),
            format!(
                "manifest mismatch: latent_dim = {latent_dim} but widths give {}/{}/{}",
                enc.output_width(),
                cls.input_width(),
                crit.input_width()
            ),
        ));
    }
    if cls.output_width() != num_classes {
        return Err(Error::format(
            path,
            at("num_classes"),
            format!(
                "manifest mismatch: num_classes = {num_classes} but classifier emits {}",
                cls.output_width()
            ),
        ));
    }
    let manifest_count: usize = specs
        .iter()
        .flat_map(MlpSpec::param_shapes)
        .map(|s| s.iter().product::<usize>())
        .sum();
    if manifest_count != count {
        return Err(Error::format(
            path,
            at("param_count"),
            format!("manifest mismatch: param_count = {count} but widths give {manifest_count}"),
        ));
    }
    let payload = &bytes[payload_start..];
    if payload.len() != 8 * count {
        return Err(Error::format(
            path,
            (payload_start + payload.len().min(8 * count)) as u64,
            format!(
                "payload length mismatch: {} bytes for {count} parameters",
                payload.len()
            ),
        ));
    }

    let mut values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let mut nets = Vec::with_capacity(3);
    for spec in specs {
        let params = spec
            .param_shapes()
            .into_iter()
            .map(|shape| {
                let len = shape.iter().product();
                Tensor::new(shape, values.by_ref().take(len).collect())
            })
            .collect::<Result<Vec<_>>>()?;
        nets.push(Mlp::from_params(spec, params)?);
    }
    let critic = nets.pop().unwrap();
    let classifier = nets.pop().unwrap();
    let encoder = nets.pop().unwrap();
    Ok(Checkpoint {
        pipeline: Pipeline::from_parts(encoder, classifier, critic)?,
        seed,
        config,
    })
}
