//! Channel dataset archives.
//!
//! Binary layout: the 8-byte magic `RISDMLDS`, a little-endian `u32` header
//! length, a JSON [`DatasetHeader`], then one record per realization in
//! header order. A record is `G` (N×M), `f` (N), `H` (N×M) and, for grouped
//! configurations, `H̄` (N'×M); every complex value is two little-endian
//! `f64` (real, imaginary) and matrices are column-major.
//!
//! The CSV layout has the columns
//! `region,user,sample,matrix,row,col,re,im` with `matrix` one of `G`, `f`,
//! `H`, `Hg`, preceded by `#`-prefixed lines holding the same JSON header.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::config::{ArchiveFormat, ExperimentConfig};
use crate::harness::Scenario;
use crate::linalg::{CMatrix, CVector};
use crate::pilots::PilotConfig;
use crate::channel::generate_user_range;
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"RISDMLDS";
const VERSION: u32 = 1;
const CHUNK: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientEntry {
    pub region: usize,
    pub user: usize,
    pub samples: usize,
    /// Short pilots feeding the neural estimator.
    pub pilots: PilotConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub version: u32,
    pub config_hash: String,
    pub seed: u64,
    /// RIS elements `N`.
    pub ris_elements: usize,
    /// BS antennas `M`.
    pub antennas: usize,
    /// Group count `N'` when grouped.
    pub groups: Option<usize>,
    pub clients: Vec<ClientEntry>,
}

/// One stored realization.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRecord {
    pub region: usize,
    pub user: usize,
    pub sample: usize,
    pub bs_ris: CMatrix,
    pub ris_user: CVector,
    pub cascaded: CMatrix,
    pub grouped: Option<CMatrix>,
}

fn header_for(scn: &Scenario) -> DatasetHeader {
    DatasetHeader {
        version: VERSION,
        config_hash: scn.config.hash(),
        seed: scn.config.seed,
        ris_elements: scn.channel.ris.total(),
        antennas: scn.channel.bs.total(),
        groups: scn.grouping.as_ref().map(|g| g.groups()),
        clients: scn
            .clients
            .iter()
            .map(|c| ClientEntry {
                region: c.region,
                user: c.user,
                samples: scn.channel.samples_per_user,
                pilots: (*c.short.pilots).clone(),
            })
            .collect(),
    }
}

fn put(out: &mut Vec<u8>, values: impl Iterator<Item = Complex64>) {
    for v in values {
        out.extend_from_slice(&v.re.to_le_bytes());
        out.extend_from_slice(&v.im.to_le_bytes());
    }
}

/// Generates the configured dataset and writes it to `path` in the format
/// selected by `channel.archive_format`. Returns the header.
pub fn write_dataset(path: &Path, config: &ExperimentConfig) -> Result<DatasetHeader> {
    let scn = Scenario::build(config)?;
    let header = header_for(&scn);
    let mut w = BufWriter::new(File::create(path)?);
    let json = serde_json::to_string(&header)?;
    match config.channel.archive_format {
        ArchiveFormat::Binary => {
            w.write_all(MAGIC)?;
            w.write_all(&(json.len() as u32).to_le_bytes())?;
            w.write_all(json.as_bytes())?;
        }
        ArchiveFormat::Csv => {
            writeln!(w, "# {json}")?;
            writeln!(w, "region,user,sample,matrix,row,col,re,im")?;
        }
    }
    for c in &header.clients {
        for start in (0..c.samples).step_by(CHUNK) {
            let end = (start + CHUNK).min(c.samples);
            let batch = generate_user_range(
                &scn.channel,
                scn.grouping.as_ref(),
                scn.frozen.as_ref(),
                config.seed,
                c.region,
                c.user,
                start..end,
            )?;
            for x in batch {
                let f = CMatrix::from_column_slice(x.ris_user.len(), 1, x.ris_user.as_slice());
                let mut mats: Vec<(&str, &CMatrix)> = vec![("G", &x.bs_ris), ("f", &f), ("H", &x.cascaded)];
                if let Some(g) = &x.grouped {
                    mats.push(("Hg", g));
                }
                match config.channel.archive_format {
                    ArchiveFormat::Binary => {
                        let mut buf = Vec::new();
                        for (_, m) in &mats {
                            put(&mut buf, m.iter().copied());
                        }
                        w.write_all(&buf)?;
                    }
                    ArchiveFormat::Csv => {
                        for (name, m) in &mats {
                            for j in 0..m.ncols() {
                                for i in 0..m.nrows() {
                                    let v = m[(i, j)];
                                    writeln!(w, "{},{},{},{name},{i},{j},{:e},{:e}", x.region, x.user, x.sample, v.re, v.im)?;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    w.flush()?;
    Ok(header)
}

fn take(r: &mut impl Read, rows: usize, cols: usize) -> Result<CMatrix> {
    let mut buf = vec![0u8; rows * cols * 16];
    r.read_exact(&mut buf)?;
    let vals: Vec<Complex64> = buf
        .chunks_exact(16)
        .map(|c| {
            Complex64::new(f64::from_le_bytes(c[..8].try_into().unwrap()), f64::from_le_bytes(c[8..].try_into().unwrap()))
        })
        .collect();
    Ok(CMatrix::from_column_slice(rows, cols, &vals))
}

fn record_shapes(h: &DatasetHeader) -> Vec<(&'static str, usize, usize)> {
    let (n, m) = (h.ris_elements, h.antennas);
    let mut s = vec![("G", n, m), ("f", n, 1), ("H", n, m)];
    if let Some(g) = h.groups {
        s.push(("Hg", g, m));
    }
    s
}

fn assemble(client: &ClientEntry, sample: usize, mut mats: Vec<CMatrix>, grouped: bool) -> DatasetRecord {
    let g = if grouped { mats.pop() } else { None };
    let h = mats.pop().expect("three matrices");
    let f = mats.pop().expect("three matrices");
    let b = mats.pop().expect("three matrices");
    DatasetRecord {
        region: client.region,
        user: client.user,
        sample,
        bs_ris: b,
        ris_user: f.column(0).clone_owned(),
        cascaded: h,
        grouped: g,
    }
}

/// Reads an archive written by [`write_dataset`] in either format.
pub fn read_dataset(path: &Path) -> Result<(DatasetHeader, Vec<DatasetRecord>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic == MAGIC {
        let mut len = [0u8; 4];
        r.read_exact(&mut len)?;
        let mut json = vec![0u8; u32::from_le_bytes(len) as usize];
        r.read_exact(&mut json)?;
        let header: DatasetHeader = serde_json::from_slice(&json)?;
        check_version(&header)?;
        let shapes = record_shapes(&header);
        let mut records = Vec::new();
        for c in &header.clients {
            for s in 0..c.samples {
                let mats = shapes.iter().map(|&(_, rows, cols)| take(&mut r, rows, cols)).collect::<Result<Vec<_>>>()?;
                records.push(assemble(c, s, mats, header.groups.is_some()));
            }
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(Error::input("trailing bytes after the last record"));
        }
        return Ok((header, records));
    }
    let mut text = String::from_utf8(magic.to_vec()).map_err(|_| Error::input("not a dataset archive"))?;
    r.read_to_string(&mut text).map_err(|_| Error::input("not a dataset archive"))?;
    read_csv(&text)
}

fn check_version(h: &DatasetHeader) -> Result<()> {
    if h.version != VERSION {
        return Err(Error::input(format!("unsupported dataset version {}", h.version)));
    }
    Ok(())
}

fn read_csv(text: &str) -> Result<(DatasetHeader, Vec<DatasetRecord>)> {
    let mut lines = text.as_bytes().lines();
    let first = lines.next().ok_or_else(|| Error::input("empty archive"))??;
    let json = first.strip_prefix("# ").ok_or_else(|| Error::input("not a dataset archive"))?;
    let header: DatasetHeader = serde_json::from_str(json)?;
    check_version(&header)?;
    let shapes = record_shapes(&header);
    let body = text.split_once('\n').map(|x| x.1).unwrap_or("");
    let mut rdr = csv::Reader::from_reader(body.as_bytes());
    let mut rows = rdr.records();
    let mut records = Vec::new();
    for c in &header.clients {
        for s in 0..c.samples {
            let mut mats = Vec::with_capacity(shapes.len());
            for &(name, nr, nc) in &shapes {
                let mut m = CMatrix::zeros(nr, nc);
                for j in 0..nc {
                    for i in 0..nr {
                        let row = rows.next().ok_or_else(|| Error::input("truncated archive"))??;
                        let field = |k: usize| row.get(k).unwrap_or("");
                        let ok = field(0) == c.region.to_string()
                            && field(1) == c.user.to_string()
                            && field(2) == s.to_string()
                            && field(3) == name
                            && field(4) == i.to_string()
                            && field(5) == j.to_string();
                        if !ok {
                            return Err(Error::input(format!("unexpected row order at sample {s} of client {}/{}", c.region, c.user)));
                        }
                        let num = |k: usize| field(k).parse::<f64>().map_err(|e| Error::input(e.to_string()));
                        m[(i, j)] = Complex64::new(num(6)?, num(7)?);
                    }
                }
                mats.push(m);
            }
            records.push(assemble(c, s, mats, header.groups.is_some()));
        }
    }
    if rows.next().is_some() {
        return Err(Error::input("trailing rows after the last record"));
    }
    Ok((header, records))
}

/// Checks that an archive was produced by `config`.
pub fn check_lineage(header: &DatasetHeader, config: &ExperimentConfig) -> Result<()> {
    if header.config_hash != config.hash() {
        return Err(Error::Lineage("dataset was generated from a different configuration".into()));
    }
    Ok(())
}
