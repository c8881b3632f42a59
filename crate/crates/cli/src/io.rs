//! CSV datasets.
//!
//! CATE/ATE: `s1,...,sd,t,y`. Sequential: `a1,...,a{d1},t1,b1,...,b{d2},t2,y`, with `m`
//! inserted before `y` for controlled direct effects. Reals are written with 17
//! significant digits so that a write/read cycle is lossless.

use std::fs::File;
use std::io::{self, Read, Write};
use std::path::Path;

use drnets::{CateObservation, DteObservation};

use crate::CliError;

pub fn fmt_real(v: f64) -> String {
    format!("{v:.16e}")
}

fn writer(path: &Path) -> Result<csv::Writer<File>, CliError> {
    let f = File::create(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    Ok(csv::Writer::from_writer(f))
}

fn io_err(path: &Path) -> impl Fn(csv::Error) -> CliError + '_ {
    move |e| CliError::Io(format!("{}: {e}", path.display()))
}

fn bit(b: bool) -> String {
    u8::from(b).to_string()
}

pub fn cate_header(d: usize) -> Vec<String> {
    let mut h: Vec<String> = (1..=d).map(|j| format!("s{j}")).collect();
    h.extend(["t".into(), "y".into()]);
    h
}

pub fn dte_header(d1: usize, d2: usize, mediator: bool) -> Vec<String> {
    let mut h: Vec<String> = (1..=d1).map(|j| format!("a{j}")).collect();
    h.push("t1".into());
    h.extend((1..=d2).map(|j| format!("b{j}")));
    h.push("t2".into());
    if mediator {
        h.push("m".into());
    }
    h.push("y".into());
    h
}

pub fn write_cate(path: &Path, data: &[CateObservation]) -> Result<(), CliError> {
    let d = data.first().map_or(0, |o| o.s.len());
    let mut w = writer(path)?;
    let err = io_err(path);
    w.write_record(cate_header(d)).map_err(&err)?;
    for o in data {
        let mut rec: Vec<String> = o.s.iter().map(|v| fmt_real(*v)).collect();
        rec.push(bit(o.t));
        rec.push(fmt_real(o.y));
        w.write_record(rec).map_err(&err)?;
    }
    w.flush().map_err(|e| CliError::Io(e.to_string()))
}

pub fn write_dte(path: &Path, data: &[DteObservation]) -> Result<(), CliError> {
    let first = data.first();
    let (d1, d2) = first.map_or((0, 0), |o| (o.s1.len(), o.s2.len()));
    let mediator = first.is_some_and(|o| o.m.is_some());
    let mut w = writer(path)?;
    let err = io_err(path);
    w.write_record(dte_header(d1, d2, mediator)).map_err(&err)?;
    for o in data {
        let mut rec: Vec<String> = o.s1.iter().map(|v| fmt_real(*v)).collect();
        rec.push(bit(o.t1));
        rec.extend(o.s2.iter().map(|v| fmt_real(*v)));
        rec.push(bit(o.t2));
        if mediator {
            rec.push(o.m.map_or_else(String::new, |m| m.to_string()));
        }
        rec.push(fmt_real(o.y));
        w.write_record(rec).map_err(&err)?;
    }
    w.flush().map_err(|e| CliError::Io(e.to_string()))
}

/// Header and rows of a CSV file.
struct Table {
    header: Vec<String>,
    rows: Vec<csv::StringRecord>,
}

fn read_table(path: &Path) -> Result<Table, CliError> {
    let mut text = String::new();
    File::open(path)
        .and_then(|mut f| f.read_to_string(&mut text))
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let header = r
        .headers()
        .map_err(|e| CliError::Usage(format!("{}: unreadable header: {e}", path.display())))?
        .iter()
        .map(|s| s.trim().to_string())
        .collect();
    let rows =
        r.records().collect::<Result<Vec<_>, _>>().map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    Ok(Table { header, rows })
}

/// Counts the leading run `prefix1, prefix2, ...` starting at `at`.
fn run_len(header: &[String], at: usize, prefix: &str) -> usize {
    header[at..].iter().enumerate().take_while(|(j, h)| **h == format!("{prefix}{}", j + 1)).count()
}

fn expect(header: &[String], at: usize, name: &str) -> Result<(), CliError> {
    match header.get(at) {
        Some(h) if h == name => Ok(()),
        Some(h) => Err(CliError::Usage(format!("column {}: expected `{name}`, found `{h}`", at + 1))),
        None => Err(CliError::Usage(format!("column {}: expected `{name}`, header ends", at + 1))),
    }
}

fn real(rec: &csv::StringRecord, row: usize, col: usize, name: &str) -> Result<f64, CliError> {
    let v = rec.get(col).unwrap_or("").trim();
    v.parse::<f64>()
        .ok()
        .filter(|x| x.is_finite())
        .ok_or_else(|| CliError::Usage(format!("row {}: column `{name}` has non-numeric value `{v}`", row + 1)))
}

fn binary(rec: &csv::StringRecord, row: usize, col: usize, name: &str) -> Result<bool, CliError> {
    match rec.get(col).unwrap_or("").trim() {
        "0" => Ok(false),
        "1" => Ok(true),
        v => Err(CliError::Usage(format!("row {}: column `{name}` must be 0 or 1, found `{v}`", row + 1))),
    }
}

fn check_width(t: &Table) -> Result<(), CliError> {
    for (i, r) in t.rows.iter().enumerate() {
        if r.len() != t.header.len() {
            return Err(CliError::Usage(format!("row {}: {} fields, header has {}", i + 1, r.len(), t.header.len())));
        }
    }
    Ok(())
}

pub fn read_cate(path: &Path) -> Result<Vec<CateObservation>, CliError> {
    let t = read_table(path)?;
    let d = run_len(&t.header, 0, "s");
    if d == 0 {
        return Err(CliError::Usage(format!(
            "column 1: expected `s1`, found `{}`",
            t.header.first().map_or("", |s| s)
        )));
    }
    expect(&t.header, d, "t")?;
    expect(&t.header, d + 1, "y")?;
    if let Some(extra) = t.header.get(d + 2) {
        return Err(CliError::Usage(format!("column {}: unexpected `{extra}`", d + 3)));
    }
    check_width(&t)?;
    t.rows
        .iter()
        .enumerate()
        .map(|(i, r)| {
            Ok(CateObservation {
                s: (0..d).map(|j| real(r, i, j, &t.header[j])).collect::<Result<_, _>>()?,
                t: binary(r, i, d, "t")?,
                y: real(r, i, d + 1, "y")?,
            })
        })
        .collect()
}

pub fn read_dte(path: &Path, mediator: bool) -> Result<Vec<DteObservation>, CliError> {
    let t = read_table(path)?;
    let h = &t.header;
    let d1 = run_len(h, 0, "a");
    if d1 == 0 {
        return Err(CliError::Usage(format!("column 1: expected `a1`, found `{}`", h.first().map_or("", |s| s))));
    }
    expect(h, d1, "t1")?;
    let d2 = run_len(h, d1 + 1, "b");
    if d2 == 0 {
        expect(h, d1 + 1, "b1")?;
    }
    let t2 = d1 + 1 + d2;
    expect(h, t2, "t2")?;
    let mut y = t2 + 1;
    if mediator {
        expect(h, y, "m")?;
        y += 1;
    }
    expect(h, y, "y")?;
    if let Some(extra) = h.get(y + 1) {
        return Err(CliError::Usage(format!("column {}: unexpected `{extra}`", y + 2)));
    }
    check_width(&t)?;
    t.rows
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let m = if mediator {
                let v = r.get(t2 + 1).unwrap_or("").trim();
                Some(v.parse::<i64>().map_err(|_| {
                    CliError::Usage(format!("row {}: column `m` must be an integer, found `{v}`", i + 1))
                })?)
            } else {
                None
            };
            Ok(DteObservation {
                s1: (0..d1).map(|j| real(r, i, j, &h[j])).collect::<Result<_, _>>()?,
                t1: binary(r, i, d1, "t1")?,
                s2: (d1 + 1..t2).map(|j| real(r, i, j, &h[j])).collect::<Result<_, _>>()?,
                t2: binary(r, i, t2, "t2")?,
                m,
                y: real(r, i, y, "y")?,
            })
        })
        .collect()
}

/// Probe points: every column is a covariate.
pub fn read_probe(path: &Path) -> Result<Vec<Vec<f64>>, CliError> {
    let t = read_table(path)?;
    check_width(&t)?;
    t.rows.iter().enumerate().map(|(i, r)| (0..t.header.len()).map(|j| real(r, i, j, &t.header[j])).collect()).collect()
}

pub fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Io(e.to_string()))?;
    let write = || -> io::Result<()> {
        let mut f = File::create(path)?;
        f.write_all(text.as_bytes())?;
        f.write_all(b"\n")
    };
    write().map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}
