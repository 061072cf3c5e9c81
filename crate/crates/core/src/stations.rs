//! Station CSV ingestion and cleaning.
//!
//! Required columns: `station_id, lon, lat, date, value, station_type`. Any
//! further columns are read as numeric covariates.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::StationFilter;
use crate::error::{Error, Result};
use crate::geometry::{Bounds, Point};
use crate::likelihood::ObservationSet;

pub const REQUIRED_COLUMNS: [&str; 6] = ["station_id", "lon", "lat", "date", "value", "station_type"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MalformedRow {
    pub line: u64,
    pub message: String,
}

/// Row counts per cleaning step. Every input row is counted exactly once:
/// `rows_in = rows_kept + malformed + Σ dropped_*`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CleaningReport {
    pub rows_in: usize,
    pub rows_kept: usize,
    pub malformed: Vec<MalformedRow>,
    pub dropped_outside_domain: usize,
    pub dropped_not_background: usize,
    pub dropped_anomalous: usize,
    pub dropped_duplicate: usize,
    pub dropped_sparse_day: usize,
    /// Days excluded for too few stations, with their station counts.
    pub excluded_days: BTreeMap<String, usize>,
    pub days_kept: usize,
}

impl CleaningReport {
    pub fn rows_dropped(&self) -> usize {
        self.malformed.len()
            + self.dropped_outside_domain
            + self.dropped_not_background
            + self.dropped_anomalous
            + self.dropped_duplicate
            + self.dropped_sparse_day
    }

    pub fn is_conserved(&self) -> bool {
        self.rows_in == self.rows_kept + self.rows_dropped()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StationDays {
    /// One observation set per kept day, in date order. The design is
    /// intercept, lon, lat, then the extra covariate columns.
    pub days: Vec<ObservationSet>,
    /// Station ids per day, aligned with the observations.
    pub station_ids: Vec<Vec<String>>,
    pub report: CleaningReport,
}

struct Row {
    station: String,
    loc: Point,
    date: String,
    value: f64,
    kind: String,
    extra: Vec<f64>,
}

/// Reads and cleans a station table.
pub fn ingest_stations(path: &Path, filter: &StationFilter, domain: &Bounds) -> Result<StationDays> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    ingest_reader(file, filter, domain).map_err(|e| match e {
        Error::Validation(m) => Error::Validation(format!("{}: {m}", path.display())),
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn ingest_reader<R: std::io::Read>(
    reader: R,
    filter: &StationFilter,
    domain: &Bounds,
) -> Result<StationDays> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(reader);
    let header = rdr
        .headers()
        .map_err(|e| Error::Format(format!("cannot read header: {e}")))?
        .clone();
    if header.is_empty() || header.iter().all(|h| h.is_empty()) {
        return Err(Error::Validation("station table is empty".into()));
    }
    let names: Vec<&str> = header.iter().collect();
    let missing: Vec<&str> = REQUIRED_COLUMNS
        .iter()
        .copied()
        .filter(|c| !names.contains(c))
        .collect();
    if !missing.is_empty() {
        return Err(Error::Format(format!(
            "header is missing column(s) {}; found {}",
            missing.join(", "),
            names.join(", ")
        )));
    }
    let col = |c: &str| names.iter().position(|n| *n == c).unwrap();
    let [i_id, i_lon, i_lat, i_date, i_val, i_kind] = REQUIRED_COLUMNS.map(col);
    let extra_cols: Vec<usize> = (0..names.len())
        .filter(|i| ![i_id, i_lon, i_lat, i_date, i_val, i_kind].contains(i))
        .collect();
    let extra_names: Vec<String> = extra_cols.iter().map(|&i| names[i].to_string()).collect();

    let mut report = CleaningReport::default();
    let mut rows: Vec<Row> = Vec::new();
    for rec in rdr.records() {
        report.rows_in += 1;
        let rec = match rec {
            Ok(r) => r,
            Err(e) => {
                let line = e.position().map_or(0, |p| p.line());
                report.malformed.push(MalformedRow {
                    line,
                    message: e.to_string(),
                });
                continue;
            }
        };
        let line = rec.position().map_or(0, |p| p.line());
        match parse_row(&rec, names.len(), [i_id, i_lon, i_lat, i_date, i_val, i_kind], &extra_cols, &extra_names) {
            Ok(r) => rows.push(r),
            Err(message) => report.malformed.push(MalformedRow { line, message }),
        }
    }
    if report.rows_in == 0 {
        return Err(Error::Validation("station table has no data rows".into()));
    }

    let mut seen: BTreeSet<(String, String)> = BTreeSet::new();
    let mut by_day: BTreeMap<String, Vec<Row>> = BTreeMap::new();
    for r in rows {
        if !domain.contains(r.loc) {
            report.dropped_outside_domain += 1;
        } else if filter.background_only && !r.kind.eq_ignore_ascii_case(&filter.background_label) {
            report.dropped_not_background += 1;
        } else if r.value > filter.max_value {
            report.dropped_anomalous += 1;
        } else if !seen.insert((r.station.clone(), r.date.clone())) {
            report.dropped_duplicate += 1;
        } else {
            by_day.entry(r.date.clone()).or_default().push(r);
        }
    }

    let mut days = Vec::new();
    let mut station_ids = Vec::new();
    let mut names = vec!["intercept".to_string(), "lon".into(), "lat".into()];
    names.extend(extra_names.iter().cloned());
    for (date, rows) in by_day {
        // a day must also identify its regression coefficients
        if rows.len() < filter.min_active.max(names.len()) {
            report.dropped_sparse_day += rows.len();
            report.excluded_days.insert(date, rows.len());
            continue;
        }
        report.rows_kept += rows.len();
        let covariates = rows
            .iter()
            .flat_map(|r| [1.0, r.loc.x, r.loc.y].into_iter().chain(r.extra.iter().copied()))
            .collect();
        station_ids.push(rows.iter().map(|r| r.station.clone()).collect());
        days.push(ObservationSet::new(
            date,
            rows.iter().map(|r| r.loc).collect(),
            rows.iter().map(|r| r.value).collect(),
            names.clone(),
            covariates,
        )?);
    }
    report.days_kept = days.len();
    debug_assert!(report.is_conserved());
    for m in &report.malformed {
        log::warn!("station table line {}: {}", m.line, m.message);
    }
    Ok(StationDays {
        days,
        station_ids,
        report,
    })
}

fn parse_row(
    rec: &csv::StringRecord,
    width: usize,
    [i_id, i_lon, i_lat, i_date, i_val, i_kind]: [usize; 6],
    extra_cols: &[usize],
    extra_names: &[String],
) -> std::result::Result<Row, String> {
    if rec.len() != width {
        return Err(format!("expected {width} fields, found {}", rec.len()));
    }
    let num = |i: usize, name: &str| -> std::result::Result<f64, String> {
        let v: f64 = rec[i]
            .parse()
            .map_err(|_| format!("{name} '{}' is not a number", &rec[i]))?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(format!("{name} is not finite"))
        }
    };
    let station = rec[i_id].to_string();
    if station.is_empty() {
        return Err("empty station_id".into());
    }
    let date = rec[i_date].to_string();
    if !is_iso_date(&date) {
        return Err(format!("date '{date}' is not an ISO-8601 date (YYYY-MM-DD)"));
    }
    Ok(Row {
        station,
        loc: Point::new(num(i_lon, "lon")?, num(i_lat, "lat")?),
        date,
        value: num(i_val, "value")?,
        kind: rec[i_kind].to_string(),
        extra: extra_cols
            .iter()
            .zip(extra_names)
            .map(|(&i, n)| num(i, n))
            .collect::<std::result::Result<_, _>>()?,
    })
}

fn is_iso_date(s: &str) -> bool {
    let b = s.as_bytes();
    if b.len() != 10 || b[4] != b'-' || b[7] != b'-' {
        return false;
    }
    let digits = |r: std::ops::Range<usize>| b[r].iter().all(u8::is_ascii_digit);
    if !(digits(0..4) && digits(5..7) && digits(8..10)) {
        return false;
    }
    let month: u32 = s[5..7].parse().unwrap();
    let day: u32 = s[8..10].parse().unwrap();
    (1..=12).contains(&month) && (1..=31).contains(&day)
}
