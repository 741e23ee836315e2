//! CSV dataset layout.
//!
//! A dataset directory holds three files:
//!
//! * `series.csv`: `series_id,t,y,first_listing,p_0..p_{dp-1},s_0..s_{ds-1}`,
//!   one row per (series, period).
//! * `future_covariates.csv`: `series_id,t,horizon_t,f_0..f_{df-1}`, the
//!   known-future covariates visible at period `t` for span-1 lead
//!   `horizon_t`.
//! * `dataset.json`: [`DatasetMeta`].

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TimeSeriesRecord;
use crate::error::{invalid, Result};

pub const SERIES_FILE: &str = "series.csv";
pub const FUTURE_FILE: &str = "future_covariates.csv";
pub const META_FILE: &str = "dataset.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    /// Periods `[0, train_len)` are available for training.
    pub train_len: usize,
    pub window: usize,
    /// Number of span-1 leads written per period in the future file.
    pub future_leads: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub records: Vec<TimeSeriesRecord>,
}

fn dims(records: &[TimeSeriesRecord]) -> Result<(usize, usize, usize)> {
    let first = records.first().map_or((0, 0, 0), |r| {
        (
            r.past_cov.first().map_or(0, Vec::len),
            r.known_future.first().map_or(0, Vec::len),
            r.static_cov.len(),
        )
    });
    for r in records {
        r.validate()?;
        let ok = r.past_cov.iter().all(|p| p.len() == first.0)
            && r.known_future.iter().all(|f| f.len() == first.1)
            && r.static_cov.len() == first.2;
        if !ok {
            return invalid(format!("series {} has inconsistent covariate dimensions", r.id));
        }
    }
    Ok(first)
}

/// Writes the two CSV files for `records`.
pub fn write_dataset_csv(dir: &Path, records: &[TimeSeriesRecord], future_leads: usize) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let (dp, df, ds) = dims(records)?;

    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(dir.join(SERIES_FILE))?));
    let mut header: Vec<String> = ["series_id", "t", "y", "first_listing"].map(String::from).to_vec();
    header.extend((0..dp).map(|i| format!("p_{i}")));
    header.extend((0..ds).map(|i| format!("s_{i}")));
    w.write_record(&header)?;
    for r in records {
        for t in 0..r.len() {
            let mut row = vec![r.id.clone(), t.to_string(), r.target[t].to_string(), r.first_listing.to_string()];
            row.extend(r.past_cov[t].iter().map(f64::to_string));
            row.extend(r.static_cov.iter().map(f64::to_string));
            w.write_record(&row)?;
        }
    }
    w.flush()?;

    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(dir.join(FUTURE_FILE))?));
    let mut header: Vec<String> = ["series_id", "t", "horizon_t"].map(String::from).to_vec();
    header.extend((0..df).map(|i| format!("f_{i}")));
    w.write_record(&header)?;
    for r in records {
        for t in 0..r.len() {
            for lead in 1..=future_leads {
                let Some(f) = r.future_cov(t, lead) else { break };
                let mut row = vec![r.id.clone(), t.to_string(), lead.to_string()];
                row.extend(f.iter().map(f64::to_string));
                w.write_record(&row)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes CSV files plus metadata.
pub fn write_dataset(dir: &Path, dataset: &Dataset) -> Result<()> {
    write_dataset_csv(dir, &dataset.records, dataset.meta.future_leads)?;
    let mut f = BufWriter::new(File::create(dir.join(META_FILE))?);
    serde_json::to_writer_pretty(&mut f, &dataset.meta)?;
    f.write_all(b"\n")?;
    Ok(())
}

fn parse_f64(s: &str, what: &str) -> Result<f64> {
    s.trim()
        .parse()
        .or_else(|_| invalid(format!("cannot parse {what} value {s:?}")))
}

fn parse_usize(s: &str, what: &str) -> Result<usize> {
    s.trim()
        .parse()
        .or_else(|_| invalid(format!("cannot parse {what} value {s:?}")))
}

fn column_block(headers: &csv::StringRecord, prefix: &str) -> Vec<usize> {
    let mut cols: Vec<(usize, usize)> = headers
        .iter()
        .enumerate()
        .filter_map(|(i, h)| h.strip_prefix(prefix).and_then(|n| n.parse().ok()).map(|n| (n, i)))
        .collect();
    cols.sort();
    cols.into_iter().map(|(_, i)| i).collect()
}

fn find(headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h == name)
        .map_or_else(|| invalid(format!("missing column {name}")), Ok)
}

/// Reads a dataset directory written by [`write_dataset`]. Series keep the
/// order of first appearance in `series.csv`.
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let meta: DatasetMeta = serde_json::from_reader(File::open(dir.join(META_FILE))?)?;

    let mut rd = csv::Reader::from_path(dir.join(SERIES_FILE))?;
    let headers = rd.headers()?.clone();
    let (c_id, c_t, c_y, c_fl) = (
        find(&headers, "series_id")?,
        find(&headers, "t")?,
        find(&headers, "y")?,
        find(&headers, "first_listing")?,
    );
    let p_cols = column_block(&headers, "p_");
    let s_cols = column_block(&headers, "s_");

    let mut order: Vec<String> = Vec::new();
    let mut by_id: BTreeMap<String, TimeSeriesRecord> = BTreeMap::new();
    for row in rd.records() {
        let row = row?;
        let id = row[c_id].to_string();
        let t = parse_usize(&row[c_t], "t")?;
        let rec = by_id.entry(id.clone()).or_insert_with(|| {
            order.push(id.clone());
            TimeSeriesRecord {
                id: id.clone(),
                target: Vec::new(),
                past_cov: Vec::new(),
                known_future: Vec::new(),
                static_cov: s_cols.iter().map(|&c| row[c].parse().unwrap_or(f64::NAN)).collect(),
                first_listing: row[c_fl].trim().parse().unwrap_or(i64::MAX),
            }
        });
        if t != rec.target.len() {
            return invalid(format!("series {id}: expected t = {}, got {t}", rec.target.len()));
        }
        rec.target.push(parse_f64(&row[c_y], "y")?);
        rec.past_cov
            .push(p_cols.iter().map(|&c| parse_f64(&row[c], "past covariate")).collect::<Result<_>>()?);
    }

    let mut rd = csv::Reader::from_path(dir.join(FUTURE_FILE))?;
    let headers = rd.headers()?.clone();
    let (c_id, c_t, c_h) = (
        find(&headers, "series_id")?,
        find(&headers, "t")?,
        find(&headers, "horizon_t")?,
    );
    let f_cols = column_block(&headers, "f_");
    for row in rd.records() {
        let row = row?;
        let Some(rec) = by_id.get_mut(&row[c_id]) else {
            return invalid(format!("future covariates for unknown series {}", &row[c_id]));
        };
        let at = parse_usize(&row[c_t], "t")? + parse_usize(&row[c_h], "horizon_t")?;
        let vals: Vec<f64> = f_cols
            .iter()
            .map(|&c| parse_f64(&row[c], "future covariate"))
            .collect::<Result<_>>()?;
        if rec.known_future.len() < rec.target.len() {
            rec.known_future.resize(rec.target.len(), Vec::new());
        }
        match rec.known_future.get_mut(at) {
            Some(slot) if slot.is_empty() => *slot = vals,
            Some(slot) if *slot == vals => {}
            Some(_) => return invalid(format!("series {}: conflicting future covariates at period {at}", rec.id)),
            None => return invalid(format!("series {}: future covariate period {at} past end", rec.id)),
        }
    }

    let df = f_cols.len();
    let mut records = Vec::with_capacity(order.len());
    for id in order {
        let mut rec = by_id.remove(&id).expect("id recorded on insert");
        if df == 0 {
            rec.known_future = vec![Vec::new(); rec.target.len()];
        }
        // period 0 is never the target of a lead >= 1; fill gaps with zeros
        for slot in rec.known_future.iter_mut() {
            if slot.is_empty() {
                *slot = vec![0.0; df];
            }
        }
        if rec.static_cov.iter().any(|v| v.is_nan()) {
            return invalid(format!("series {}: unparseable static covariate", rec.id));
        }
        rec.validate()?;
        records.push(rec);
    }
    Ok(Dataset { meta, records })
}
