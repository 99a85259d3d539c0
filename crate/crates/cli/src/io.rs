//! CSV ingestion and the long-form output tables.

use std::fs::File;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use chrono::NaiveDate;
use laf_core::diagnostics::PosteriorSummary;
use laf_core::{Dataset, MeanCovPath};
use nalgebra::DMatrix;

const DATE_FORMAT: &str = "%Y-%m-%d";

/// An ingested dataset; `date_origin` is set when the time column held dates,
/// which are then stored as day offsets from it.
#[derive(Debug, Clone)]
pub struct Ingested {
    pub data: Dataset,
    pub date_origin: Option<NaiveDate>,
}

pub fn parse_date(s: &str) -> Option<NaiveDate> {
    NaiveDate::parse_from_str(s, DATE_FORMAT).ok()
}

pub fn format_date(d: NaiveDate) -> String {
    d.format(DATE_FORMAT).to_string()
}

/// Reads `time, series...` with a header row. Empty cells are missing. Dates
/// are measured in days from `date_origin`, or from the first date if `None`.
pub fn ingest_csv(path: &Path, date_origin: Option<NaiveDate>) -> Result<Ingested> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let header = rdr
        .headers()
        .with_context(|| format!("reading header of {}", path.display()))?
        .clone();
    if header.len() < 2 {
        bail!(
            "{}: need a time column and at least one series, found {} column(s)",
            path.display(),
            header.len()
        );
    }
    let p = header.len() - 1;
    let mut times = Vec::new();
    let mut cells: Vec<Vec<Option<f64>>> = vec![Vec::new(); p];
    let mut origin = date_origin;
    let mut dated: Option<bool> = None;
    for rec in rdr.records() {
        let rec = rec.with_context(|| format!("reading {}", path.display()))?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != header.len() {
            bail!(
                "{} line {line}: {} fields, expected {}",
                path.display(),
                rec.len(),
                header.len()
            );
        }
        let raw_t = &rec[0];
        let t = match raw_t.parse::<f64>() {
            Ok(t) if dated != Some(true) && t.is_finite() => {
                dated = Some(false);
                t
            }
            _ => {
                let d = parse_date(raw_t)
                    .filter(|_| dated != Some(false))
                    .ok_or_else(|| anyhow!("{} line {line}: bad time '{raw_t}'", path.display()))?;
                dated = Some(true);
                let o = *origin.get_or_insert(d);
                (d - o).num_days() as f64
            }
        };
        if let Some(&prev) = times.last() {
            if !(t > prev) {
                bail!(
                    "{} line {line}: time {raw_t} does not increase on the previous row",
                    path.display()
                );
            }
        }
        times.push(t);
        for j in 0..p {
            let s = &rec[j + 1];
            let v = if s.is_empty() || s.eq_ignore_ascii_case("na") || s.eq_ignore_ascii_case("nan")
            {
                None
            } else {
                let v: f64 = s.parse().map_err(|_| {
                    anyhow!(
                        "{} line {line}: bad value '{s}' in column {}",
                        path.display(),
                        &header[j + 1]
                    )
                })?;
                if !v.is_finite() {
                    bail!(
                        "{} line {line}: non-finite value in column {}",
                        path.display(),
                        &header[j + 1]
                    );
                }
                Some(v)
            };
            cells[j].push(v);
        }
    }
    if times.is_empty() {
        bail!("{}: no data rows", path.display());
    }
    let names = header.iter().skip(1).map(str::to_string).collect();
    let data = Dataset::from_options(times, &cells)?.with_names(names)?;
    Ok(Ingested {
        data,
        date_origin: if dated == Some(true) { origin } else { None },
    })
}

fn writer(path: &Path) -> Result<csv::Writer<File>> {
    csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))
}

/// Writes numeric times and blank missing cells.
pub fn write_dataset(path: &Path, data: &Dataset) -> Result<()> {
    let mut w = writer(path)?;
    let mut header = vec!["t".to_string()];
    header.extend(data.names.iter().cloned());
    w.write_record(&header)?;
    for i in 0..data.len() {
        let mut row = vec![data.times[i].to_string()];
        for j in 0..data.p() {
            row.push(if data.observed[(j, i)] {
                data.values[(j, i)].to_string()
            } else {
                String::new()
            });
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// `{prefix}_mu.csv` (t, j, value) and `{prefix}_sigma.csv` (t, j, k, value)
/// over the upper triangle; series are numbered from 1.
pub fn write_path(dir: &Path, prefix: &str, times: &[f64], path: &MeanCovPath) -> Result<()> {
    let mut w = writer(&dir.join(format!("{prefix}_mu.csv")))?;
    w.write_record(["t", "j", "value"])?;
    for (i, t) in times.iter().enumerate() {
        for j in 0..path.p() {
            w.write_record([
                t.to_string(),
                (j + 1).to_string(),
                path.mu[(j, i)].to_string(),
            ])?;
        }
    }
    w.flush()?;
    let mut w = writer(&dir.join(format!("{prefix}_sigma.csv")))?;
    w.write_record(["t", "j", "k", "value"])?;
    for (i, t) in times.iter().enumerate() {
        for k in 0..path.p() {
            for j in 0..=k {
                w.write_record([
                    t.to_string(),
                    (j + 1).to_string(),
                    (k + 1).to_string(),
                    path.sigma[i][(j, k)].to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// `summary_mu.csv` and `summary_sigma.csv` with posterior means and hpd bands.
pub fn write_summary(dir: &Path, times: &[f64], s: &PosteriorSummary) -> Result<()> {
    let p = s.mean.p();
    let mut w = writer(&dir.join("summary_mu.csv"))?;
    w.write_record(["t", "j", "mean", "hpd_lo", "hpd_hi"])?;
    for (i, t) in times.iter().enumerate() {
        for j in 0..p {
            w.write_record([
                t.to_string(),
                (j + 1).to_string(),
                s.mean.mu[(j, i)].to_string(),
                s.mu_lo[(j, i)].to_string(),
                s.mu_hi[(j, i)].to_string(),
            ])?;
        }
    }
    w.flush()?;
    let mut w = writer(&dir.join("summary_sigma.csv"))?;
    w.write_record(["t", "j", "k", "mean", "hpd_lo", "hpd_hi"])?;
    for (i, t) in times.iter().enumerate() {
        for k in 0..p {
            for j in 0..=k {
                w.write_record([
                    t.to_string(),
                    (j + 1).to_string(),
                    (k + 1).to_string(),
                    s.mean.sigma[i][(j, k)].to_string(),
                    s.sigma_lo[i][(j, k)].to_string(),
                    s.sigma_hi[i][(j, k)].to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

struct LongTable {
    times: Vec<f64>,
    /// (step, j, k, value) with 0-based indices; `k == j` for mean tables.
    rows: Vec<(usize, usize, usize, f64)>,
    p: usize,
}

fn read_long(path: &Path, value_col: &str, has_k: bool) -> Result<LongTable> {
    let mut rdr =
        csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let header = rdr.headers()?.clone();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| anyhow!("{}: no '{name}' column", path.display()))
    };
    let (ct, cj, cv) = (col("t")?, col("j")?, col(value_col)?);
    let ck = if has_k { Some(col("k")?) } else { None };
    let mut times: Vec<f64> = Vec::new();
    let mut rows = Vec::new();
    let mut p = 0;
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let num = |c: usize| -> Result<f64> {
            rec.get(c)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| anyhow!("{} line {line}: unreadable field", path.display()))
        };
        let idx = |c: usize| -> Result<usize> {
            rec.get(c)
                .and_then(|s| s.parse::<usize>().ok())
                .filter(|&v| v >= 1)
                .map(|v| v - 1)
                .ok_or_else(|| anyhow!("{} line {line}: bad series index", path.display()))
        };
        let t = num(ct)?;
        if times.last() != Some(&t) {
            if times.last().is_some_and(|&prev| !(t > prev)) {
                bail!("{} line {line}: times out of order", path.display());
            }
            times.push(t);
        }
        let j = idx(cj)?;
        let k = match ck {
            Some(c) => idx(c)?,
            None => j,
        };
        p = p.max(j + 1).max(k + 1);
        rows.push((times.len() - 1, j, k, num(cv)?));
    }
    Ok(LongTable { times, rows, p })
}

/// Reads a path written by [`write_path`] (`value_col = "value"`) or the mean
/// columns of [`write_summary`] (`value_col = "mean"`).
pub fn read_path(
    mu_file: &Path,
    sigma_file: &Path,
    value_col: &str,
) -> Result<(Vec<f64>, MeanCovPath)> {
    let m = read_long(mu_file, value_col, false)?;
    let s = read_long(sigma_file, value_col, true)?;
    if m.times != s.times || m.p != s.p {
        bail!(
            "{} and {} disagree on times or dimension",
            mu_file.display(),
            sigma_file.display()
        );
    }
    let (n, p) = (m.times.len(), m.p);
    let mut mu = DMatrix::from_element(p, n, f64::NAN);
    for &(i, j, _, v) in &m.rows {
        mu[(j, i)] = v;
    }
    let mut sigma = vec![DMatrix::from_element(p, p, f64::NAN); n];
    for &(i, j, k, v) in &s.rows {
        sigma[i][(j, k)] = v;
        sigma[i][(k, j)] = v;
    }
    if mu
        .iter()
        .chain(sigma.iter().flat_map(|s| s.iter()))
        .any(|v| v.is_nan())
    {
        bail!(
            "{} / {}: incomplete table",
            mu_file.display(),
            sigma_file.display()
        );
    }
    Ok((m.times, MeanCovPath { mu, sigma }))
}

/// Writes rows of equal length under `header`.
pub fn write_table(
    path: &Path,
    header: &[&str],
    rows: impl IntoIterator<Item = Vec<String>>,
) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.flush()?;
    Ok(())
}
