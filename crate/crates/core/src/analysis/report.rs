use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::SpectrumReport;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A tensor as JSON: shape plus row-major data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorDump {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl From<&Tensor> for TensorDump {
    fn from(t: &Tensor) -> Self {
        Self {
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
        }
    }
}

impl TryFrom<TensorDump> for Tensor {
    type Error = Error;

    fn try_from(d: TensorDump) -> Result<Tensor> {
        Tensor::new(&d.shape, d.data)
    }
}

/// Pretty-printed JSON with a trailing newline. Non-finite numbers become
/// `null`.
pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// Renders values in `[0, 1]` as an ASCII greyscale PGM, one pixel per
/// entry, white for 1.
pub fn pgm(matrix: &[Vec<f64>]) -> Result<String> {
    let height = matrix.len();
    let width = matrix.first().map_or(0, Vec::len);
    if height == 0 || width == 0 || matrix.iter().any(|r| r.len() != width) {
        return Err(Error::shape("heatmap must be a non-empty rectangle"));
    }
    let mut out = format!("P2\n{width} {height}\n255\n");
    for row in matrix {
        let pixels: Vec<String> = row
            .iter()
            .map(|v| ((v.clamp(0.0, 1.0) * 255.0).round() as u8).to_string())
            .collect();
        writeln!(out, "{}", pixels.join(" ")).expect("writing to a string");
    }
    Ok(out)
}

pub fn write_pgm(path: impl AsRef<Path>, matrix: &[Vec<f64>]) -> Result<()> {
    std::fs::write(path, pgm(matrix)?)?;
    Ok(())
}

#[derive(Serialize)]
struct SpectrumRow {
    index: usize,
    sigma: f64,
    log_sigma: f64,
}

/// CSV with columns `index, sigma, log_sigma`.
pub fn write_spectrum_csv(path: impl AsRef<Path>, report: &SpectrumReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    for (index, (&sigma, &log_sigma)) in report.sigma.iter().zip(&report.log_sigma).enumerate() {
        w.serialize(SpectrumRow { index, sigma, log_sigma }).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Data(format!("{other:?}")),
    }
}
