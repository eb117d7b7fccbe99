//! File formats: samples CSV, statistics JSON, sweep CSV, trials CSV.
//!
//! Readers take any `Read` plus a display name used in error messages; the
//! `*_file` helpers open paths. Floats are written in shortest round-trip
//! form, so a write followed by a read reproduces values exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::certificate::Certificate;
use crate::error::{Error, Result};
use crate::fairgen::{CurvePoint, LossSample, ShiftTrial};
use crate::stats::{SampleRecord, StatsTable, SubpopKey, SubpopStats};

pub const SWEEP_HEADER: [&str; 3] = ["rho", "bound", "feasible"];
pub const TRIALS_HEADER: [&str; 3] = ["seed", "distance", "loss"];

/// Parsed contents of a samples CSV.
#[derive(Debug, Clone, PartialEq)]
pub enum SamplesFile {
    /// `s,y,loss` or `s,y,loss,shifted_loss`.
    Losses(Vec<LossSample>),
    /// `s,y,p0,...,p{C-1}`.
    Predictions(Vec<SampleRecord>),
}

impl SamplesFile {
    pub fn len(&self) -> usize {
        match self {
            SamplesFile::Losses(v) => v.len(),
            SamplesFile::Predictions(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records for `aggregate_stats`.
    pub fn records(&self) -> Vec<SampleRecord> {
        match self {
            SamplesFile::Losses(v) => v.iter().map(|l| SampleRecord::with_loss(l.key.s, l.key.y, l.loss)).collect(),
            SamplesFile::Predictions(v) => v.clone(),
        }
    }
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        line: 0,
        message: e.to_string(),
    })
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn parse_err(name: &str, line: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        path: name.to_string(),
        line,
        message: message.into(),
    }
}

/// Comma-separated fields of one line, trimmed.
type Row = Vec<String>;

/// Header and non-blank body rows, each with its 1-based line number.
fn rows<R: Read>(mut reader: R, name: &str) -> Result<(Row, Vec<(u64, Row)>)> {
    let mut text = String::new();
    reader
        .read_to_string(&mut text)
        .map_err(|e| parse_err(name, 0, e.to_string()))?;
    let mut header = None;
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let row: Row = raw.split(',').map(|f| f.trim().to_string()).collect();
        if header.is_none() {
            header = Some(row);
        } else {
            out.push((i as u64 + 1, row));
        }
    }
    let header = header.ok_or_else(|| Error::Schema(format!("{name}: missing header")))?;
    Ok((header, out))
}

fn field<T: std::str::FromStr>(rec: &[String], i: usize, what: &str, name: &str, line: u64) -> Result<T> {
    rec[i]
        .parse()
        .map_err(|_| parse_err(name, line, format!("cannot parse {what} '{}'", rec[i])))
}

fn float(rec: &[String], i: usize, what: &str, name: &str, line: u64) -> Result<f64> {
    let v: f64 = field(rec, i, what, name, line)?;
    if !v.is_finite() {
        return Err(parse_err(name, line, format!("{what} must be finite")));
    }
    Ok(v)
}

/// Reads a samples CSV for an `S x C` table.
pub fn read_samples<R: Read>(reader: R, name: &str, s_count: usize, c_count: usize) -> Result<SamplesFile> {
    let (header, body) = rows(reader, name)?;
    let h: Vec<&str> = header.iter().map(String::as_str).collect();
    let probs: Vec<String> = (0..c_count).map(|i| format!("p{i}")).collect();
    let loss_mode = match h.as_slice() {
        ["s", "y", "loss"] => Some(false),
        ["s", "y", "loss", "shifted_loss"] => Some(true),
        ["s", "y", rest @ ..] if rest.iter().copied().eq(probs.iter().map(String::as_str)) => None,
        _ => {
            return Err(Error::Schema(format!(
                "{name}: expected header s,y,loss[,shifted_loss] or s,y,p0..p{}, found {}",
                c_count.saturating_sub(1),
                header.join(",")
            )))
        }
    };
    let width = header.len();
    let mut losses = Vec::new();
    let mut preds = Vec::new();
    for (line, rec) in body {
        if rec.len() != width {
            return Err(parse_err(name, line, format!("expected {width} fields, found {}", rec.len())));
        }
        let s: usize = field(&rec, 0, "s", name, line)?;
        let y: usize = field(&rec, 1, "y", name, line)?;
        if s >= s_count || y >= c_count {
            return Err(parse_err(
                name,
                line,
                format!("key (s={s}, y={y}) outside a {s_count}x{c_count} table"),
            ));
        }
        match loss_mode {
            Some(shifted) => {
                let loss = float(&rec, 2, "loss", name, line)?;
                if loss < 0.0 {
                    return Err(parse_err(name, line, "loss must be non-negative"));
                }
                let shifted_loss = if shifted {
                    Some(float(&rec, 3, "shifted_loss", name, line)?)
                } else {
                    None
                };
                losses.push(LossSample {
                    key: SubpopKey::new(s, y),
                    loss,
                    shifted_loss,
                });
            }
            None => {
                let p = (0..c_count)
                    .map(|i| float(&rec, 2 + i, "probability", name, line))
                    .collect::<Result<Vec<f64>>>()?;
                preds.push(SampleRecord::with_prediction(s, y, p));
            }
        }
    }
    Ok(match loss_mode {
        Some(_) => SamplesFile::Losses(losses),
        None => SamplesFile::Predictions(preds),
    })
}

pub fn read_samples_file(path: &Path, s_count: usize, c_count: usize) -> Result<SamplesFile> {
    read_samples(open(path)?, &path.display().to_string(), s_count, c_count)
}

/// Writes loss samples, with a `shifted_loss` column when every sample has one.
pub fn write_loss_samples<W: Write>(writer: W, samples: &[LossSample]) -> Result<()> {
    let shifted = !samples.is_empty() && samples.iter().all(|s| s.shifted_loss.is_some());
    let mut w = writer;
    if shifted {
        writeln!(w, "s,y,loss,shifted_loss")?;
    } else {
        writeln!(w, "s,y,loss")?;
    }
    for s in samples {
        match (shifted, s.shifted_loss) {
            (true, Some(v)) => writeln!(w, "{},{},{},{}", s.key.s, s.key.y, s.loss, v)?,
            _ => writeln!(w, "{},{},{}", s.key.s, s.key.y, s.loss)?,
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_loss_samples_file(path: &Path, samples: &[LossSample]) -> Result<()> {
    write_loss_samples(create(path)?, samples)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CellJson {
    s: usize,
    y: usize,
    n: u64,
    #[serde(rename = "E")]
    mean: f64,
    #[serde(rename = "V")]
    variance: f64,
    p: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StatsJson {
    #[serde(rename = "S")]
    s_count: usize,
    #[serde(rename = "C")]
    c_count: usize,
    #[serde(rename = "M")]
    loss_bound: Option<f64>,
    cells: Vec<CellJson>,
}

pub fn stats_to_json(table: &StatsTable) -> Result<String> {
    let c = table.c_count();
    let doc = StatsJson {
        s_count: table.s_count(),
        c_count: c,
        loss_bound: table.loss_bound(),
        cells: table
            .cells()
            .iter()
            .enumerate()
            .map(|(i, cell)| CellJson {
                s: i / c,
                y: i % c,
                n: cell.n,
                mean: cell.mean,
                variance: cell.variance,
                p: cell.mass,
            })
            .collect(),
    };
    Ok(serde_json::to_string_pretty(&doc)?)
}

pub fn stats_from_json(text: &str) -> Result<StatsTable> {
    let doc: StatsJson = serde_json::from_str(text).map_err(|e| Error::Schema(format!("statistics JSON: {e}")))?;
    let (s_count, c_count) = (doc.s_count, doc.c_count);
    let mut cells: Vec<Option<SubpopStats>> = vec![None; s_count * c_count];
    for c in &doc.cells {
        if c.s >= s_count || c.y >= c_count {
            return Err(Error::KeyOutOfRange {
                s: c.s,
                y: c.y,
                s_count,
                c_count,
            });
        }
        let slot = &mut cells[c.s * c_count + c.y];
        if slot.is_some() {
            return Err(Error::Schema(format!("duplicate cell (s={}, y={})", c.s, c.y)));
        }
        *slot = Some(SubpopStats::new(c.n, c.mean, c.variance, c.p));
    }
    let cells = cells
        .into_iter()
        .enumerate()
        .map(|(i, c)| c.ok_or_else(|| Error::Schema(format!("missing cell (s={}, y={})", i / c_count, i % c_count))))
        .collect::<Result<Vec<_>>>()?;
    StatsTable::new(s_count, c_count, doc.loss_bound, cells)
}

pub fn read_stats_file(path: &Path) -> Result<StatsTable> {
    let mut text = String::new();
    open(path)?.read_to_string(&mut text)?;
    stats_from_json(&text)
}

pub fn write_stats_file(path: &Path, table: &StatsTable) -> Result<()> {
    write_text(path, &stats_to_json(table)?)
}

pub fn write_json_file<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &serde_json::to_string_pretty(value)?)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut w = create(path)?;
    w.write_all(text.as_bytes())?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn check_header(header: &[String], expected: &[&str], name: &str) -> Result<()> {
    if !header.iter().map(String::as_str).eq(expected.iter().copied()) {
        return Err(Error::Schema(format!(
            "{name}: expected header {}, found {}",
            expected.join(","),
            header.join(",")
        )));
    }
    Ok(())
}

/// Sweep rows sorted by radius; infeasible rows leave `bound` empty.
pub fn write_sweep<W: Write>(writer: W, certs: &[Certificate]) -> Result<()> {
    let mut sorted: Vec<&Certificate> = certs.iter().collect();
    sorted.sort_by(|a, b| a.rho.total_cmp(&b.rho));
    let mut w = writer;
    writeln!(w, "{}", SWEEP_HEADER.join(","))?;
    for c in sorted {
        match c.value {
            Some(v) if c.feasible => writeln!(w, "{},{},true", c.rho, v)?,
            _ => writeln!(w, "{},,false", c.rho)?,
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_sweep_file(path: &Path, certs: &[Certificate]) -> Result<()> {
    write_sweep(create(path)?, certs)
}

pub fn read_sweep<R: Read>(reader: R, name: &str) -> Result<Vec<CurvePoint>> {
    let (header, body) = rows(reader, name)?;
    check_header(&header, &SWEEP_HEADER, name)?;
    let mut out = Vec::with_capacity(body.len());
    for (line, rec) in body {
        if rec.len() != 3 {
            return Err(parse_err(name, line, format!("expected 3 fields, found {}", rec.len())));
        }
        let rho = float(&rec, 0, "rho", name, line)?;
        let feasible: bool = field(&rec, 2, "feasible", name, line)?;
        let bound = match (feasible, rec[1].is_empty()) {
            (true, false) => Some(float(&rec, 1, "bound", name, line)?),
            (false, true) => None,
            _ => return Err(parse_err(name, line, "bound must be present exactly when feasible")),
        };
        out.push(CurvePoint { rho, bound });
    }
    Ok(out)
}

pub fn read_sweep_file(path: &Path) -> Result<Vec<CurvePoint>> {
    read_sweep(open(path)?, &path.display().to_string())
}

pub fn write_trials<W: Write>(writer: W, trials: &[ShiftTrial]) -> Result<()> {
    let mut w = writer;
    writeln!(w, "{}", TRIALS_HEADER.join(","))?;
    for t in trials {
        writeln!(w, "{},{},{}", t.seed, t.distance, t.loss)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_trials_file(path: &Path, trials: &[ShiftTrial]) -> Result<()> {
    write_trials(create(path)?, trials)
}

/// Reads trials; fields absent from the CSV are left empty (`n = 0`).
pub fn read_trials<R: Read>(reader: R, name: &str) -> Result<Vec<ShiftTrial>> {
    let (header, body) = rows(reader, name)?;
    check_header(&header, &TRIALS_HEADER, name)?;
    body.into_iter()
        .map(|(line, rec)| {
            if rec.len() != 3 {
                return Err(parse_err(name, line, format!("expected 3 fields, found {}", rec.len())));
            }
            Ok(ShiftTrial {
                seed: field(&rec, 0, "seed", name, line)?,
                distance: float(&rec, 1, "distance", name, line)?,
                loss: float(&rec, 2, "loss", name, line)?,
                n: 0,
                q: Vec::new(),
                alpha: None,
                alpha_prime: None,
            })
        })
        .collect()
}

pub fn read_trials_file(path: &Path) -> Result<Vec<ShiftTrial>> {
    read_trials(open(path)?, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::{aggregate_stats, LossKind};

    #[test]
    fn loss_samples_round_trip() {
        let text = "s,y,loss\n0,0,0.5\n0,1,0\n1,0,1\n1,1,0.25\n";
        let f = read_samples(text.as_bytes(), "t.csv", 2, 2).unwrap();
        assert_eq!(f.len(), 4);
        let SamplesFile::Losses(v) = &f else { panic!("loss mode expected") };
        let mut out = Vec::new();
        write_loss_samples(&mut out, v).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), text);
    }

    #[test]
    fn out_of_range_key_reports_line() {
        let text = "s,y,loss\n0,0,0.5\n\n5,1,0.2\n";
        match read_samples(text.as_bytes(), "bad.csv", 2, 2) {
            Err(Error::Parse { path, line, .. }) => {
                assert_eq!(path, "bad.csv");
                assert_eq!(line, 4);
            }
            other => panic!("unexpected {other:?}"),
        }
        let text = "s,y,loss\n0,0,abc\n";
        assert!(matches!(
            read_samples(text.as_bytes(), "x", 2, 2),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn prediction_mode_and_bad_headers() {
        let text = "s,y,p0,p1\n0,1,0.5,0.5\n1,0,0.9,0.1\n";
        let f = read_samples(text.as_bytes(), "p", 2, 2).unwrap();
        assert!(matches!(f, SamplesFile::Predictions(ref v) if v.len() == 2));
        assert!(matches!(
            read_samples("s,y,p0\n".as_bytes(), "p", 2, 2),
            Err(Error::Schema(_))
        ));
        assert!(matches!(
            read_samples("y,s,loss\n".as_bytes(), "p", 2, 2),
            Err(Error::Schema(_))
        ));
    }

    #[test]
    fn stats_json_round_trip() {
        let recs: Vec<SampleRecord> = (0..40)
            .map(|i| SampleRecord::with_loss(i % 2, (i / 2) % 2, (i % 7) as f64 / 7.0))
            .collect();
        let t = aggregate_stats(&recs, 2, 2, LossKind::ZeroOne).unwrap();
        let text = stats_to_json(&t).unwrap();
        assert_eq!(stats_from_json(&text).unwrap(), t);
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["S"], 2);
        assert_eq!(v["cells"].as_array().unwrap().len(), 4);
        assert!(v["cells"][0].get("E").is_some());
        assert!(matches!(
            stats_from_json(r#"{"S":1,"C":1,"M":null,"cells":[]}"#),
            Err(Error::Schema(_))
        ));
    }

    #[test]
    fn trials_schema_checked() {
        let text = "seed,distance,loss\n1,0.2,0.3\n";
        let t = read_trials(text.as_bytes(), "t").unwrap();
        let mut out = Vec::new();
        write_trials(&mut out, &t).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), text);
        assert!(matches!(
            read_trials("distance,seed,loss\n0.2,1,0.3\n".as_bytes(), "t"),
            Err(Error::Schema(_))
        ));
    }

    #[test]
    fn sweep_rows_parse() {
        let text = "rho,bound,feasible\n0.1,,false\n0.2,0.5,true\n";
        let c = read_sweep(text.as_bytes(), "s").unwrap();
        assert_eq!(c[0].bound, None);
        assert_eq!(c[1].bound, Some(0.5));
        assert!(read_sweep("rho,bound,feasible\n0.1,0.3,false\n".as_bytes(), "s").is_err());
    }
}
