//! Result CSVs: `method,Q,grouped,snr_db,nmse_db,n,seed`, dB to 4 decimals.

use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::eval::MethodKey;
use crate::Result;

fn four_decimals<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_str(&format!("{v:.4}"))
}

fn plain<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_str(&format!("{v}"))
}

fn parse_f64<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    let s = String::deserialize(d)?;
    s.trim().parse().map_err(serde::de::Error::custom)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: String,
    #[serde(rename = "Q")]
    pub q: usize,
    pub grouped: bool,
    #[serde(serialize_with = "plain", deserialize_with = "parse_f64")]
    pub snr_db: f64,
    #[serde(serialize_with = "four_decimals", deserialize_with = "parse_f64")]
    pub nmse_db: f64,
    pub n: usize,
    pub seed: u64,
}

impl ResultRow {
    pub fn new(key: MethodKey, grouped: bool, snr_db: f64, nmse_db: f64, n: usize, seed: u64) -> Self {
        Self { method: key.method.to_string(), q: key.q, grouped, snr_db, nmse_db, n, seed }
    }
}

/// Like [`ResultRow`] with the test region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionRow {
    pub method: String,
    #[serde(rename = "Q")]
    pub q: usize,
    pub grouped: bool,
    pub region: usize,
    #[serde(serialize_with = "plain", deserialize_with = "parse_f64")]
    pub snr_db: f64,
    #[serde(serialize_with = "four_decimals", deserialize_with = "parse_f64")]
    pub nmse_db: f64,
    pub n: usize,
    pub seed: u64,
}

impl RegionRow {
    #[allow(clippy::too_many_arguments)]
    pub fn new(key: MethodKey, grouped: bool, region: usize, snr_db: f64, nmse_db: f64, n: usize, seed: u64) -> Self {
        Self { method: key.method.to_string(), q: key.q, grouped, region, snr_db, nmse_db, n, seed }
    }
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_results_csv(path: &Path, rows: &[ResultRow]) -> Result<()> {
    write_rows(path, rows, &["method", "Q", "grouped", "snr_db", "nmse_db", "n", "seed"])
}

pub fn write_region_csv(path: &Path, rows: &[RegionRow]) -> Result<()> {
    write_rows(path, rows, &["method", "Q", "grouped", "region", "snr_db", "nmse_db", "n", "seed"])
}

/// Per-sample rows share the results schema with `n = 1`.
pub fn write_sample_csv(path: &Path, rows: &[ResultRow]) -> Result<()> {
    write_results_csv(path, rows)
}

pub fn read_results_csv(path: &Path) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Into::into)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::Method;

    #[test]
    fn csv_roundtrip_with_fixed_header_and_precision() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        let rows = vec![
            ResultRow::new(MethodKey::new(Method::Dml, 32), true, 10.0, -18.123456, 100, 7),
            ResultRow::new(MethodKey::new(Method::Ls, 256), false, -5.0, 3.0, 5, 7),
        ];
        write_results_csv(&p, &rows).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("method,Q,grouped,snr_db,nmse_db,n,seed"));
        assert_eq!(lines.next(), Some("dml,32,true,10,-18.1235,100,7"));
        assert_eq!(lines.next(), Some("ls,256,false,-5,3.0000,5,7"));
        let back = read_results_csv(&p).unwrap();
        assert_eq!(back[1], rows[1]);
        assert!((back[0].nmse_db + 18.1235).abs() < 1e-12);
    }
}
