//! File formats: model and result JSON, report CSV.
//!
//! JSON floats are written as `{:.16e}` (17 significant digits) and parsed
//! with correct rounding, so every `f64` survives a round trip bit for bit.

use std::io::{self, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::decompose::UtilizationReport;
use crate::error::{read_file, write_file, Error, Result};
use crate::linalg::Matrix;
use crate::nn::{LayerDef, NetworkDef};

pub const MODEL_FORMAT: &str = "subrank-model-v1";

struct ExactFloats;

impl serde_json::ser::Formatter for ExactFloats {
    fn write_f64<W: ?Sized + Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        write!(writer, "{value:.16e}")
    }

    fn write_f32<W: ?Sized + Write>(&mut self, writer: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(writer, f64::from(value))
    }
}

/// Serializes `value` as single-line JSON with 17-digit floats and a
/// trailing newline.
pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, ExactFloats);
    value.serialize(&mut ser)?;
    buf.push(b'\n');
    Ok(String::from_utf8(buf).expect("serde_json emits UTF-8"))
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    write_file(path.as_ref(), &to_json(value)?)?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    Ok(serde_json::from_str(&read_file(path.as_ref())?)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum LayerRecord {
    Linear {
        #[serde(rename = "in")]
        in_dim: usize,
        out: usize,
        weight: Vec<Vec<f64>>,
        bias: Vec<f64>,
    },
    Relu,
    Skip {
        inner: Vec<LayerRecord>,
    },
    Factored {
        #[serde(rename = "in")]
        in_dim: usize,
        out: usize,
        r: usize,
        left: Vec<Vec<f64>>,
        right: Vec<Vec<f64>>,
        bias: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub format: String,
    pub input_dim: usize,
    pub layers: Vec<LayerRecord>,
}

fn record(layer: &LayerDef) -> LayerRecord {
    match layer {
        LayerDef::Linear { w, b } => {
            LayerRecord::Linear { in_dim: w.cols(), out: w.rows(), weight: w.to_rows(), bias: b.clone() }
        }
        LayerDef::Factored { left, right, b } => LayerRecord::Factored {
            in_dim: right.cols(),
            out: left.rows(),
            r: left.cols(),
            left: left.to_rows(),
            right: right.to_rows(),
            bias: b.clone(),
        },
        LayerDef::Relu => LayerRecord::Relu,
        LayerDef::Skip { inner } => LayerRecord::Skip { inner: inner.iter().map(record).collect() },
    }
}

fn matrix(rows: &[Vec<f64>], shape: (usize, usize), index: usize, name: &str) -> Result<Matrix> {
    let structure = |message: String| Error::Structure { layer: index, message };
    if rows.len() != shape.0 || rows.iter().any(|r| r.len() != shape.1) {
        return Err(structure(format!("{name} is not {}x{}", shape.0, shape.1)));
    }
    if shape.0 == 0 || shape.1 == 0 {
        return Err(structure(format!("{name} is empty")));
    }
    Matrix::from_rows(rows).map_err(|e| structure(format!("{name}: {e}")))
}

fn layer(rec: &LayerRecord, index: usize) -> Result<LayerDef> {
    Ok(match rec {
        LayerRecord::Linear { in_dim, out, weight, bias } => {
            LayerDef::Linear { w: matrix(weight, (*out, *in_dim), index, "weight")?, b: bias.clone() }
        }
        LayerRecord::Factored { in_dim, out, r, left, right, bias } => LayerDef::Factored {
            left: matrix(left, (*out, *r), index, "left factor")?,
            right: matrix(right, (*r, *in_dim), index, "right factor")?,
            b: bias.clone(),
        },
        LayerRecord::Relu => LayerDef::Relu,
        LayerRecord::Skip { inner } => {
            LayerDef::Skip { inner: inner.iter().map(|r| layer(r, index)).collect::<Result<_>>()? }
        }
    })
}

impl ModelFile {
    pub fn from_network(net: &NetworkDef) -> Self {
        Self { format: MODEL_FORMAT.into(), input_dim: net.input_dim, layers: net.layers.iter().map(record).collect() }
    }

    pub fn into_network(self) -> Result<NetworkDef> {
        if self.format != MODEL_FORMAT {
            return Err(Error::Version { found: self.format, expected: MODEL_FORMAT.into() });
        }
        let layers = self.layers.iter().enumerate().map(|(i, r)| layer(r, i)).collect::<Result<Vec<_>>>()?;
        NetworkDef::new(self.input_dim, layers)
    }
}

pub fn model_to_json(net: &NetworkDef) -> Result<String> {
    to_json(&ModelFile::from_network(net))
}

pub fn model_from_json(text: &str) -> Result<NetworkDef> {
    // Check the tag before the layer schema so foreign files get a version error.
    #[derive(Deserialize)]
    struct Tag {
        format: String,
    }
    let tag: Tag = serde_json::from_str(text)?;
    if tag.format != MODEL_FORMAT {
        return Err(Error::Version { found: tag.format, expected: MODEL_FORMAT.into() });
    }
    serde_json::from_str::<ModelFile>(text)?.into_network()
}

pub fn save_model(path: impl AsRef<Path>, net: &NetworkDef) -> Result<()> {
    write_file(path.as_ref(), &model_to_json(net)?)?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<NetworkDef> {
    model_from_json(&read_file(path.as_ref())?)
}

pub const SNAPSHOT_HEADER: [&str; 9] =
    ["layer", "m", "d", "orig_rank", "utilized_rank", "max_rank", "utilization", "param_ratio", "flop_ratio"];

/// One row per linear layer under [`SNAPSHOT_HEADER`].
pub fn report_to_csv(report: &UtilizationReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(SNAPSHOT_HEADER)?;
    for a in &report.layers {
        w.write_record([
            a.layer.to_string(),
            a.m.to_string(),
            a.d.to_string(),
            a.original_rank.to_string(),
            a.utilized_rank.to_string(),
            a.max_rank().to_string(),
            format!("{:.16e}", a.utilization),
            format!("{:.16e}", a.param_ratio),
            format!("{:.16e}", a.flop_ratio),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv emits UTF-8"))
}
