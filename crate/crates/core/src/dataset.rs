//! Measurement datasets on disk.
//!
//! Format: one line of JSON header, then one line per sensor holding the
//! sensor coordinates, the clean value and the noisy value, each written as
//! the 16 hex digits of its IEEE-754 bit pattern. Round trips are bit exact.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fem::BoundaryMeasurement;
use crate::mesh::{Mesh, MeshError};
use crate::noise::NoisyData;
use crate::sensors::{locate_sensors, SensorSet};
use crate::source::Domain;
use crate::Point;

pub const FORMAT: &str = "blt-dataset";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("dataset parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("dataset version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("inconsistent dataset: {0}")]
    Inconsistent(String),
    #[error(transparent)]
    Mesh(#[from] MeshError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub format: String,
    pub version: u32,
    pub delta: f64,
    pub seed: u64,
    pub sensor_count: usize,
    pub domain: Domain,
    /// `|Phi^delta - Phi|_2`, informational.
    pub noise_l2: f64,
    /// `|Phi^delta - Phi|_2 / |Phi|_2`, informational.
    pub noise_relative_l2: f64,
}

/// Noisy data together with the sensor positions it was measured at.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub domain: Domain,
    pub sensors: Vec<Point>,
    pub data: NoisyData,
}

impl Dataset {
    pub fn new(domain: Domain, sensors: Vec<Point>, data: NoisyData) -> Result<Dataset, DatasetError> {
        if sensors.len() != data.clean.len() || data.clean.len() != data.noisy.len() {
            return Err(DatasetError::Inconsistent(format!(
                "{} sensors, {} clean and {} noisy values",
                sensors.len(),
                data.clean.len(),
                data.noisy.len()
            )));
        }
        Ok(Dataset { domain, sensors, data })
    }

    /// Locates the stored sensors on a mesh of the same domain.
    pub fn sensor_set(&self, mesh: &Mesh) -> Result<SensorSet, DatasetError> {
        Ok(locate_sensors(self.domain.radius, self.sensors.clone(), mesh)?)
    }

    /// Noisy values as a measurement, for CSV export.
    pub fn noisy_measurement(&self) -> BoundaryMeasurement {
        BoundaryMeasurement { dim: self.domain.dim, points: self.sensors.clone(), values: self.data.noisy.clone() }
    }

    pub fn header(&self) -> Header {
        Header {
            format: FORMAT.into(),
            version: VERSION,
            delta: self.data.delta,
            seed: self.data.seed,
            sensor_count: self.sensors.len(),
            domain: self.domain,
            noise_l2: self.data.noise_l2(),
            noise_relative_l2: self.data.noise_relative_l2(),
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = serde_json::to_string(&self.header()).expect("header serializes");
        s.push('\n');
        let hex = |v: f64| format!("{:016x}", v.to_bits());
        for (k, p) in self.sensors.iter().enumerate() {
            let mut cols: Vec<String> = p.iter().take(self.domain.dim).map(|v| hex(*v)).collect();
            cols.push(hex(self.data.clean[k]));
            cols.push(hex(self.data.noisy[k]));
            s.push_str(&cols.join(" "));
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Dataset, DatasetError> {
        let mut lines = text.lines();
        let first = lines.next().ok_or(DatasetError::Parse { line: 1, message: "empty file".into() })?;
        let raw: serde_json::Value =
            serde_json::from_str(first).map_err(|e| DatasetError::Parse { line: 1, message: e.to_string() })?;
        if raw.get("format").and_then(|f| f.as_str()) != Some(FORMAT) {
            return Err(DatasetError::Parse { line: 1, message: format!("not a {FORMAT} file") });
        }
        if let Some(v) = raw.get("version").and_then(|v| v.as_u64()) {
            if v != VERSION as u64 {
                return Err(DatasetError::Version { found: v as u32, expected: VERSION });
            }
        }
        let header: Header =
            serde_json::from_value(raw).map_err(|e| DatasetError::Parse { line: 1, message: e.to_string() })?;
        let dim = header.domain.dim;
        if dim != 2 && dim != 3 {
            return Err(DatasetError::Parse { line: 1, message: format!("dimension {dim}") });
        }
        let mut sensors = Vec::with_capacity(header.sensor_count);
        let mut clean = Vec::with_capacity(header.sensor_count);
        let mut noisy = Vec::with_capacity(header.sensor_count);
        for k in 0..header.sensor_count {
            let line = k + 2;
            let row = lines.next().ok_or_else(|| DatasetError::Parse {
                line,
                message: format!("truncated: expected {} sensor rows, found {k}", header.sensor_count),
            })?;
            let vals = row
                .split_whitespace()
                .map(|t| {
                    if t.len() != 16 {
                        return Err(DatasetError::Parse { line, message: format!("bad hex field {t:?}") });
                    }
                    u64::from_str_radix(t, 16)
                        .map(f64::from_bits)
                        .map_err(|e| DatasetError::Parse { line, message: format!("bad hex field {t:?}: {e}") })
                })
                .collect::<Result<Vec<f64>, _>>()?;
            if vals.len() != dim + 2 {
                return Err(DatasetError::Parse { line, message: format!("expected {} fields, found {}", dim + 2, vals.len()) });
            }
            sensors.push(crate::point_from_slice(&vals[..dim]).expect("dim is 2 or 3"));
            clean.push(vals[dim]);
            noisy.push(vals[dim + 1]);
        }
        if let Some((k, extra)) = lines.enumerate().find(|(_, l)| !l.trim().is_empty()) {
            return Err(DatasetError::Parse {
                line: header.sensor_count + 2 + k,
                message: format!("unexpected trailing data {extra:?}"),
            });
        }
        Dataset::new(header.domain, sensors, NoisyData { clean, noisy, delta: header.delta, seed: header.seed })
    }
}

pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<(), DatasetError> {
    let path = path.as_ref();
    std::fs::write(path, ds.to_text()).map_err(|source| DatasetError::Io { path: path.display().to_string(), source })
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset, DatasetError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| DatasetError::Io { path: path.display().to_string(), source })?;
    Dataset::from_text(&text)
}
