//! Streaming trip-record ingestion and cleaning.
//!
//! Rules are applied in order and a record is charged to the first rule it
//! violates: (1) drop-off strictly after pick-up, (2) duration of at least one
//! minute, (3) both endpoints inside the bounding box. Rows that cannot be
//! parsed are counted and skipped.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};

use super::grid::GridSpec;
use crate::error::{Error, Result};
use crate::solver::format_f64;

pub const DEFAULT_TIME_FORMAT: &str = "%Y-%m-%d %H:%M:%S";

#[derive(Debug, Clone, PartialEq)]
pub struct TripRecord {
    pub pickup_time: NaiveDateTime,
    pub dropoff_time: NaiveDateTime,
    pub pickup_lon: f64,
    pub pickup_lat: f64,
    pub dropoff_lon: f64,
    pub dropoff_lat: f64,
    /// Miles.
    pub distance: f64,
}

impl TripRecord {
    pub fn duration_secs(&self) -> i64 {
        (self.dropoff_time - self.pickup_time).num_seconds()
    }
}

/// Header names of the trip-record columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnMapping {
    pub pickup_time: String,
    pub dropoff_time: String,
    pub pickup_lon: String,
    pub pickup_lat: String,
    pub dropoff_lon: String,
    pub dropoff_lat: String,
    pub distance: String,
}

impl Default for ColumnMapping {
    /// Yellow-cab 2015/2016 names.
    fn default() -> Self {
        Self {
            pickup_time: "tpep_pickup_datetime".into(),
            dropoff_time: "tpep_dropoff_datetime".into(),
            pickup_lon: "pickup_longitude".into(),
            pickup_lat: "pickup_latitude".into(),
            dropoff_lon: "dropoff_longitude".into(),
            dropoff_lat: "dropoff_latitude".into(),
            distance: "trip_distance".into(),
        }
    }
}

impl ColumnMapping {
    fn names(&self) -> [&str; 7] {
        [
            &self.pickup_time,
            &self.dropoff_time,
            &self.pickup_lon,
            &self.pickup_lat,
            &self.dropoff_lon,
            &self.dropoff_lat,
            &self.distance,
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IngestConfig {
    pub columns: ColumnMapping,
    pub delimiter: u8,
    pub time_format: String,
    pub grid: GridSpec,
    pub min_duration_secs: i64,
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self {
            columns: ColumnMapping::default(),
            delimiter: b',',
            time_format: DEFAULT_TIME_FORMAT.into(),
            grid: GridSpec::default(),
            min_duration_secs: 60,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CleaningRule {
    TimestampOrder,
    MinimumDuration,
    BoundingBox,
}

/// Per-rule rejection counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectionTally {
    pub unreadable: usize,
    pub timestamp_order: usize,
    pub minimum_duration: usize,
    pub bounding_box: usize,
}

impl RejectionTally {
    pub fn rejected(&self) -> usize {
        self.unreadable + self.timestamp_order + self.minimum_duration + self.bounding_box
    }

    fn charge(&mut self, rule: CleaningRule) {
        match rule {
            CleaningRule::TimestampOrder => self.timestamp_order += 1,
            CleaningRule::MinimumDuration => self.minimum_duration += 1,
            CleaningRule::BoundingBox => self.bounding_box += 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IngestReport {
    pub trips: Vec<TripRecord>,
    pub rows_read: usize,
    pub tally: RejectionTally,
}

/// The first cleaning rule the record violates, if any.
pub fn violated_rule(
    trip: &TripRecord,
    grid: &GridSpec,
    min_duration_secs: i64,
) -> Option<CleaningRule> {
    if trip.dropoff_time <= trip.pickup_time {
        Some(CleaningRule::TimestampOrder)
    } else if trip.duration_secs() < min_duration_secs {
        Some(CleaningRule::MinimumDuration)
    } else if !grid.contains(trip.pickup_lon, trip.pickup_lat)
        || !grid.contains(trip.dropoff_lon, trip.dropoff_lat)
    {
        Some(CleaningRule::BoundingBox)
    } else {
        None
    }
}

/// Applies the cleaning rules to already-parsed records.
pub fn clean(trips: Vec<TripRecord>, config: &IngestConfig) -> (Vec<TripRecord>, RejectionTally) {
    let mut tally = RejectionTally::default();
    let kept = trips
        .into_iter()
        .filter(
            |t| match violated_rule(t, &config.grid, config.min_duration_secs) {
                Some(rule) => {
                    tally.charge(rule);
                    false
                }
                None => true,
            },
        )
        .collect();
    (kept, tally)
}

fn parse_row(record: &csv::ByteRecord, idx: &[usize; 7], format: &str) -> Option<TripRecord> {
    let field = |k: usize| {
        record
            .get(idx[k])
            .and_then(|b| std::str::from_utf8(b).ok())
            .map(str::trim)
    };
    let time = |k: usize| field(k).and_then(|s| NaiveDateTime::parse_from_str(s, format).ok());
    let num = |k: usize| field(k).and_then(|s| s.parse::<f64>().ok());
    Some(TripRecord {
        pickup_time: time(0)?,
        dropoff_time: time(1)?,
        pickup_lon: num(2)?,
        pickup_lat: num(3)?,
        dropoff_lon: num(4)?,
        dropoff_lat: num(5)?,
        distance: num(6)?,
    })
}

/// Single pass over delimiter-separated records with a header row. Only a
/// header lacking a mapped column is fatal.
pub fn ingest_trips<R: Read>(reader: R, config: &IngestConfig) -> Result<IngestReport> {
    config.grid.validate()?;
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(config.delimiter)
        .flexible(true)
        .has_headers(true)
        .from_reader(reader);
    let headers = rdr.byte_headers()?.clone();
    let mut idx = [0usize; 7];
    for (slot, name) in idx.iter_mut().zip(config.columns.names()) {
        *slot = headers
            .iter()
            .position(|h| {
                std::str::from_utf8(h)
                    .map(|h| h.trim() == name)
                    .unwrap_or(false)
            })
            .ok_or_else(|| Error::Parse(format!("trip header lacks column '{name}'")))?;
    }
    let mut report = IngestReport {
        trips: Vec::new(),
        rows_read: 0,
        tally: RejectionTally::default(),
    };
    let mut record = csv::ByteRecord::new();
    loop {
        match rdr.read_byte_record(&mut record) {
            Ok(false) => break,
            Ok(true) => {
                report.rows_read += 1;
                match parse_row(&record, &idx, &config.time_format) {
                    None => report.tally.unreadable += 1,
                    Some(trip) => {
                        match violated_rule(&trip, &config.grid, config.min_duration_secs) {
                            Some(rule) => report.tally.charge(rule),
                            None => report.trips.push(trip),
                        }
                    }
                }
            }
            Err(e) if e.is_io_error() => return Err(e.into()),
            Err(_) => {
                report.rows_read += 1;
                report.tally.unreadable += 1;
            }
        }
    }
    Ok(report)
}

pub fn ingest_trips_path(path: &Path, config: &IngestConfig) -> Result<IngestReport> {
    ingest_trips(File::open(path)?, config)
}

/// Writes records with the configured header names and delimiter.
pub fn write_trips_csv<W: Write>(
    writer: W,
    trips: &[TripRecord],
    config: &IngestConfig,
) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .delimiter(config.delimiter)
        .from_writer(writer);
    w.write_record(config.columns.names())?;
    for t in trips {
        w.write_record(&[
            t.pickup_time.format(&config.time_format).to_string(),
            t.dropoff_time.format(&config.time_format).to_string(),
            format_f64(t.pickup_lon),
            format_f64(t.pickup_lat),
            format_f64(t.dropoff_lon),
            format_f64(t.dropoff_lat),
            format_f64(t.distance),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEADER: &str =
        "trip_distance,tpep_dropoff_datetime,pickup_latitude,pickup_longitude,tpep_pickup_datetime,dropoff_longitude,dropoff_latitude\n";

    fn row(pick: &str, drop: &str, plon: f64, plat: f64) -> String {
        format!("1.5,{drop},{plat},{plon},{pick},-73.85,40.75\n")
    }

    #[test]
    fn each_rule_is_charged_once() {
        let mut text = HEADER.to_string();
        text += &row("2016-01-01 10:00:00", "2016-01-01 10:10:00", -73.85, 40.75);
        text += &row("2016-01-01 10:00:00", "2016-01-01 09:50:00", -73.85, 40.75);
        text += &row("2016-01-01 10:00:00", "2016-01-01 10:00:30", -73.85, 40.75);
        text += &row("2016-01-01 10:00:00", "2016-01-01 10:10:00", -770.4, 40.75);
        text += "garbage,row\n";
        text += &row("not a time", "2016-01-01 10:10:00", -73.85, 40.75);
        let rep = ingest_trips(text.as_bytes(), &IngestConfig::default()).unwrap();
        assert_eq!(rep.rows_read, 6);
        assert_eq!(rep.trips.len(), 1);
        assert_eq!(
            rep.tally,
            RejectionTally {
                unreadable: 2,
                timestamp_order: 1,
                minimum_duration: 1,
                bounding_box: 1
            }
        );
    }

    #[test]
    fn earlier_rule_wins() {
        let mut text = HEADER.to_string();
        text += &row("2016-01-01 10:00:00", "2016-01-01 09:59:50", -770.4, 40.75);
        let rep = ingest_trips(text.as_bytes(), &IngestConfig::default()).unwrap();
        assert_eq!(rep.tally.timestamp_order, 1);
        assert_eq!(rep.tally.bounding_box, 0);
    }

    #[test]
    fn missing_column_is_fatal() {
        let text = "a,b\n1,2\n";
        assert!(matches!(
            ingest_trips(text.as_bytes(), &IngestConfig::default()),
            Err(Error::Parse(_))
        ));
    }

    #[test]
    fn cleaning_is_idempotent_and_round_trips() {
        let mut text = HEADER.to_string();
        for k in 0..5 {
            text += &row(
                "2016-01-01 10:00:00",
                &format!("2016-01-01 10:0{k}:30"),
                -73.85,
                40.75,
            );
        }
        let cfg = IngestConfig::default();
        let rep = ingest_trips(text.as_bytes(), &cfg).unwrap();
        assert_eq!(rep.trips.len(), 4);
        let (again, tally) = clean(rep.trips.clone(), &cfg);
        assert_eq!(again, rep.trips);
        assert_eq!(tally.rejected(), 0);
        let mut buf = Vec::new();
        write_trips_csv(&mut buf, &rep.trips, &cfg).unwrap();
        let back = ingest_trips(buf.as_slice(), &cfg).unwrap();
        assert_eq!(back.trips, rep.trips);
    }
}
