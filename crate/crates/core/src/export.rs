//! Binary and CSV writers for symbol grids, dense operators and traces.
//!
//! Binary payloads are raw little-endian arrays; each comes with a JSON
//! sidecar describing shape and layout.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::evolution::{EnergyTrace, GevreyProbeResult};

/// A float that serializes as a number when finite and as `"overflow"`,
/// `"-overflow"` or `"nan"` otherwise, instead of JSON `null`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tagged(pub f64);

impl Serialize for Tagged {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        if self.0.is_finite() {
            serializer.serialize_f64(self.0)
        } else {
            serializer.serialize_str(non_finite_tag(self.0))
        }
    }
}

impl<'de> Deserialize<'de> for Tagged {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Number(f64),
            Tag(String),
        }
        match Raw::deserialize(deserializer)? {
            Raw::Number(v) => Ok(Tagged(v)),
            Raw::Tag(tag) => match tag.as_str() {
                "overflow" => Ok(Tagged(f64::INFINITY)),
                "-overflow" => Ok(Tagged(f64::NEG_INFINITY)),
                "nan" => Ok(Tagged(f64::NAN)),
                other => Err(serde::de::Error::custom(format!("unknown float tag {other:?}"))),
            },
        }
    }
}

/// `#[serde(with = "tagged")]` for `f64` fields.
pub mod tagged {
    use super::*;

    pub fn serialize<S: Serializer>(value: &f64, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        Tagged(*value).serialize(serializer)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(deserializer: D) -> std::result::Result<f64, D::Error> {
        Ok(Tagged::deserialize(deserializer)?.0)
    }
}

/// `#[serde(with = "tagged_option")]` for `Option<f64>` fields.
pub mod tagged_option {
    use super::*;

    pub fn serialize<S: Serializer>(value: &Option<f64>, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        value.map(Tagged).serialize(serializer)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Option<f64>, D::Error> {
        Ok(Option::<Tagged>::deserialize(deserializer)?.map(|t| t.0))
    }
}

/// `#[serde(with = "tagged_vec")]` for `Vec<f64>` fields.
pub mod tagged_vec {
    use super::*;

    pub fn serialize<S: Serializer>(values: &[f64], serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_seq(values.iter().map(|&v| Tagged(v)))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Vec<f64>, D::Error> {
        Ok(Vec::<Tagged>::deserialize(deserializer)?.into_iter().map(|t| t.0).collect())
    }
}

/// `#[serde(with = "tagged_pairs")]` for `Vec<(f64, f64)>` fields.
pub mod tagged_pairs {
    use super::*;

    pub fn serialize<S: Serializer>(values: &[(f64, f64)], serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_seq(values.iter().map(|&(a, b)| (Tagged(a), Tagged(b))))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Vec<(f64, f64)>, D::Error> {
        Ok(Vec::<(Tagged, Tagged)>::deserialize(deserializer)?.into_iter().map(|(a, b)| (a.0, b.0)).collect())
    }
}

/// `#[serde(with = "tagged_option_vec")]` for `Option<Vec<f64>>` fields.
pub mod tagged_option_vec {
    use super::*;

    pub fn serialize<S: Serializer>(values: &Option<Vec<f64>>, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        values.as_ref().map(|v| v.iter().map(|&x| Tagged(x)).collect::<Vec<_>>()).serialize(serializer)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Option<Vec<f64>>, D::Error> {
        Ok(Option::<Vec<Tagged>>::deserialize(deserializer)?.map(|v| v.into_iter().map(|t| t.0).collect()))
    }
}

fn non_finite_tag(value: f64) -> &'static str {
    if value.is_nan() {
        "nan"
    } else if value > 0.0 {
        "overflow"
    } else {
        "-overflow"
    }
}

/// Formats a float for CSV output, tagging non-finite values.
pub fn csv_value(value: f64) -> String {
    if value.is_finite() {
        format!("{value:e}")
    } else {
        non_finite_tag(value).to_string()
    }
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".json");
    PathBuf::from(name)
}

#[derive(Debug, Clone, Serialize)]
pub struct ColumnSidecar {
    pub format: &'static str,
    pub rows: usize,
    pub columns: Vec<String>,
    pub layout: &'static str,
}

/// Writes equal-length columns as consecutive `f64` LE arrays, plus
/// `<path>.json`.
pub fn write_columns(path: &Path, columns: &[(&str, &[f64])]) -> Result<()> {
    let rows = columns.first().map_or(0, |c| c.1.len());
    if let Some((name, c)) = columns.iter().find(|c| c.1.len() != rows) {
        return Err(Error::Domain(format!("column {name} has {} rows, expected {rows}", c.len())));
    }
    let mut out = BufWriter::new(File::create(path)?);
    for (_, column) in columns {
        for v in column.iter() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    let sidecar = ColumnSidecar {
        format: "f64-le",
        rows,
        columns: columns.iter().map(|c| c.0.to_string()).collect(),
        layout: "column-major",
    };
    serde_json::to_writer_pretty(File::create(sidecar_path(path))?, &sidecar)?;
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct MatrixSidecar {
    pub format: &'static str,
    pub rows: usize,
    pub cols: usize,
    pub layout: &'static str,
    pub label: String,
}

/// Writes a row-major `n x n` complex matrix as interleaved `f64` LE pairs,
/// plus `<path>.json`.
pub fn write_dense_matrix(path: &Path, n: usize, matrix: &[Complex64], label: &str) -> Result<()> {
    if matrix.len() != n * n {
        return Err(Error::Domain(format!("matrix has {} entries, expected {}", matrix.len(), n * n)));
    }
    let mut out = BufWriter::new(File::create(path)?);
    for v in matrix {
        out.write_all(&v.re.to_le_bytes())?;
        out.write_all(&v.im.to_le_bytes())?;
    }
    out.flush()?;
    let sidecar = MatrixSidecar {
        format: "complex128-le",
        rows: n,
        cols: n,
        layout: "row-major",
        label: label.to_string(),
    };
    serde_json::to_writer_pretty(File::create(sidecar_path(path))?, &sidecar)?;
    Ok(())
}

/// Writes `t,l2,hm,gevrey,rho_fit,q_hat_running`. Probe columns are filled
/// from the snapshot nearest in time, and empty when absent.
pub fn write_trace_csv(path: &Path, trace: &EnergyTrace, probe: Option<&GevreyProbeResult>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "t,l2,hm,gevrey,rho_fit,q_hat_running")?;
    let nearest = |values: &[(f64, f64)], t: f64| -> Option<f64> {
        values
            .iter()
            .min_by(|a, b| (a.0 - t).abs().total_cmp(&(b.0 - t).abs()))
            .map(|v| v.1)
    };
    for (i, &t) in trace.times.iter().enumerate() {
        let gevrey = trace.gevrey.as_ref().map(|g| csv_value(g[i])).unwrap_or_default();
        let (rho, q_hat) = match probe {
            Some(p) => {
                let rho: Vec<(f64, f64)> = p.rho_fit.iter().map(|r| (r.t, r.rho)).collect();
                (
                    nearest(&rho, t).map(csv_value).unwrap_or_default(),
                    nearest(&p.q_hat_running, t).map(csv_value).unwrap_or_default(),
                )
            }
            None => (String::new(), String::new()),
        };
        writeln!(
            out,
            "{},{},{},{},{},{}",
            csv_value(t),
            csv_value(trace.l2[i]),
            csv_value(trace.hm[i]),
            gevrey,
            rho,
            q_hat
        )?;
    }
    out.flush()?;
    Ok(())
}

/// Writes any serializable value as pretty JSON.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut out, value)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Serialize, Deserialize)]
    struct Record {
        #[serde(with = "tagged")]
        value: f64,
        #[serde(with = "tagged_vec")]
        values: Vec<f64>,
        #[serde(with = "tagged_option")]
        maybe: Option<f64>,
    }

    #[test]
    fn non_finite_values_are_tagged() {
        let record = Record { value: f64::INFINITY, values: vec![f64::NAN, 1.5, f64::NEG_INFINITY], maybe: None };
        let s = serde_json::to_string(&record).unwrap();
        assert_eq!(s, r#"{"value":"overflow","values":["nan",1.5,"-overflow"],"maybe":null}"#);
        let back: Record = serde_json::from_str(&s).unwrap();
        assert_eq!(back.value, f64::INFINITY);
        assert!(back.values[0].is_nan());
        assert_eq!(back.values[2], f64::NEG_INFINITY);
        assert!(serde_json::from_str::<Record>(r#"{"value":"inf","values":[],"maybe":2.0}"#).is_err());
    }

    #[test]
    fn columns_round_trip() {
        let dir = std::env::temp_dir().join(format!("gevolab-export-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("cols.bin");
        write_columns(&path, &[("a", &[1.0, 2.0]), ("b", &[3.0, -4.0])]).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let values: Vec<f64> = bytes.chunks(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        assert_eq!(values, vec![1.0, 2.0, 3.0, -4.0]);
        assert!(sidecar_path(&path).exists());
        assert!(write_columns(&path, &[("a", &[1.0]), ("b", &[])]).is_err());
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
