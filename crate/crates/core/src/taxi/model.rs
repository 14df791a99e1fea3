//! Empirical grid model built from cleaned trips.
//!
//! Epochs are `epoch_minutes` wide and aligned to midnight of the earliest
//! pick-up day unless an explicit start is configured:
//!
//! ```text
//! demand(c)   = #pick-ups in c / #epochs spanned
//! dest(c, c') = #trips c → c' / #trips from c          (uniform if no trips, flagged)
//! init(c)     ∝ #pick-ups in c during epochs 0..K
//! ```

use std::io::{Read, Write};

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};

use super::grid::GridSpec;
use super::ingest::TripRecord;
use crate::error::{Error, Result};

/// Tolerance for simplex checks on deserialised models.
const SIMPLEX_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridModel {
    pub grid: GridSpec,
    pub epoch_minutes: u32,
    pub num_epochs: usize,
    /// Mean pick-ups per epoch, per cell.
    pub demand_rate: Vec<f64>,
    /// `destination[c]`: distribution of drop-off cells for trips starting in `c`.
    pub destination: Vec<Vec<f64>>,
    /// Cells whose destination row is the uniform fallback.
    pub destination_fallback: Vec<bool>,
    pub initial_distribution: Vec<f64>,
    /// Per-cell price multiplier `η_s`.
    pub price_multiplier: Vec<f64>,
    /// Passengers' price cap `η`.
    pub eta: f64,
    /// Upper edges (miles) of the trip-distance histogram bins; the last bin is open.
    pub distance_bins: Vec<f64>,
    /// Per-origin trip-distance histogram over `distance_bins` (+1 overflow bin).
    pub distance_histogram: Vec<Vec<f64>>,
    /// Per-origin mean trip distance (miles); zero-trip origins use the global mean.
    pub mean_trip_distance: Vec<f64>,
}

fn check_simplex(what: &str, p: &[f64]) -> Result<()> {
    let sum: f64 = p.iter().sum();
    if p.iter().any(|v| !v.is_finite() || *v < 0.0) || (sum - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::Config(format!(
            "{what} is not a probability vector (sum {sum})"
        )));
    }
    Ok(())
}

impl GridModel {
    pub fn num_cells(&self) -> usize {
        self.grid.num_cells()
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        let n = self.num_cells();
        let lens = [
            ("demand_rate", self.demand_rate.len()),
            ("destination", self.destination.len()),
            ("destination_fallback", self.destination_fallback.len()),
            ("initial_distribution", self.initial_distribution.len()),
            ("price_multiplier", self.price_multiplier.len()),
            ("distance_histogram", self.distance_histogram.len()),
            ("mean_trip_distance", self.mean_trip_distance.len()),
        ];
        for (what, len) in lens {
            if len != n {
                return Err(Error::Config(format!(
                    "grid model field {what} has {len} entries, expected {n}"
                )));
            }
        }
        check_simplex("initial taxi distribution", &self.initial_distribution)?;
        for (c, row) in self.destination.iter().enumerate() {
            if row.len() != n {
                return Err(Error::Config(format!(
                    "destination row {c} has {} entries, expected {n}",
                    row.len()
                )));
            }
            check_simplex(&format!("destination distribution of cell {c}"), row)?;
        }
        for (c, row) in self.distance_histogram.iter().enumerate() {
            if row.len() != self.distance_bins.len() + 1 {
                return Err(Error::Config(format!(
                    "distance histogram of cell {c} has wrong length"
                )));
            }
            check_simplex(&format!("distance histogram of cell {c}"), row)?;
        }
        if self
            .demand_rate
            .iter()
            .chain(&self.mean_trip_distance)
            .any(|v| !v.is_finite() || *v < 0.0)
        {
            return Err(Error::Config(
                "demand rates and trip distances must be finite and non-negative".into(),
            ));
        }
        check_price_multipliers(self.eta, &self.price_multiplier)
    }

    pub fn write_json<W: Write>(&self, writer: W) -> Result<()> {
        serde_json::to_writer_pretty(writer, self)?;
        Ok(())
    }

    pub fn read_json<R: Read>(reader: R) -> Result<Self> {
        let model: Self = serde_json::from_reader(reader)?;
        model.validate()?;
        Ok(model)
    }

    /// Same model with another price cap; fails unless `η > η_s` everywhere.
    pub fn with_eta(&self, eta: f64) -> Result<Self> {
        check_price_multipliers(eta, &self.price_multiplier)?;
        Ok(Self {
            eta,
            ..self.clone()
        })
    }
}

/// `η > η_s ≥ 0` for every cell.
pub fn check_price_multipliers(eta: f64, multipliers: &[f64]) -> Result<()> {
    if !eta.is_finite() {
        return Err(Error::Config(format!("price cap η = {eta} is not finite")));
    }
    if let Some((c, m)) = multipliers
        .iter()
        .enumerate()
        .find(|(_, &m)| !(m >= 0.0 && m < eta))
    {
        return Err(Error::Config(format!(
            "price multiplier {m} at cell {c} violates η > η_s ≥ 0 with η = {eta}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridModelConfig {
    pub grid: GridSpec,
    pub epoch_minutes: u32,
    /// `K`: number of leading epochs whose pick-ups define the initial distribution.
    pub initial_epochs: usize,
    /// Epoch 0 start; defaults to midnight of the earliest pick-up day.
    pub start: Option<NaiveDateTime>,
    pub eta: f64,
    /// Per-cell `η_s`; `None` means 1 everywhere.
    pub price_multiplier: Option<Vec<f64>>,
    pub distance_bins: Vec<f64>,
}

impl Default for GridModelConfig {
    fn default() -> Self {
        Self {
            grid: GridSpec::default(),
            epoch_minutes: 5,
            initial_epochs: 3,
            start: None,
            eta: 2.33,
            price_multiplier: None,
            distance_bins: vec![0.5, 1.0, 2.0, 3.0, 5.0],
        }
    }
}

fn normalize(counts: &[f64]) -> Option<Vec<f64>> {
    let total: f64 = counts.iter().sum();
    (total > 0.0).then(|| counts.iter().map(|c| c / total).collect())
}

fn distance_bin(edges: &[f64], d: f64) -> usize {
    edges.iter().position(|&e| d < e).unwrap_or(edges.len())
}

/// Aggregates cleaned trips into the per-cell model.
pub fn build_grid_model(trips: &[TripRecord], config: &GridModelConfig) -> Result<GridModel> {
    let grid = config.grid;
    grid.validate()?;
    if trips.is_empty() {
        return Err(Error::Empty("cleaned trips"));
    }
    if config.epoch_minutes == 0 {
        return Err(Error::Config("epoch length must be positive".into()));
    }
    if config.distance_bins.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Config(
            "distance bin edges must be increasing".into(),
        ));
    }
    let n = grid.num_cells();
    let multipliers = config
        .price_multiplier
        .clone()
        .unwrap_or_else(|| vec![1.0; n]);
    if multipliers.len() != n {
        return Err(Error::DimensionMismatch {
            what: "price multipliers",
            expected: n,
            got: multipliers.len(),
        });
    }
    check_price_multipliers(config.eta, &multipliers)?;

    let earliest = trips.iter().map(|t| t.pickup_time).min().expect("nonempty");
    let start = config.start.unwrap_or_else(|| {
        earliest
            .date()
            .and_hms_opt(0, 0, 0)
            .expect("midnight exists")
    });
    let epoch_secs = i64::from(config.epoch_minutes) * 60;

    let nbins = config.distance_bins.len() + 1;
    let mut pickups = vec![0.0; n];
    let mut initial = vec![0.0; n];
    let mut dest = vec![vec![0.0; n]; n];
    let mut hist = vec![vec![0.0; nbins]; n];
    let mut dist_sum = vec![0.0; n];
    let mut last_epoch = 0i64;
    for t in trips {
        let origin = grid.bin_to_cell(t.pickup_lon, t.pickup_lat)?;
        let target = grid.bin_to_cell(t.dropoff_lon, t.dropoff_lat)?;
        let secs = (t.pickup_time - start).num_seconds();
        if secs < 0 {
            return Err(Error::Config(format!(
                "trip picked up at {} precedes the epoch start {start}",
                t.pickup_time
            )));
        }
        let epoch = secs / epoch_secs;
        last_epoch = last_epoch.max(epoch);
        pickups[origin] += 1.0;
        if (epoch as usize) < config.initial_epochs {
            initial[origin] += 1.0;
        }
        dest[origin][target] += 1.0;
        hist[origin][distance_bin(&config.distance_bins, t.distance)] += 1.0;
        dist_sum[origin] += t.distance;
    }
    let num_epochs = last_epoch as usize + 1;
    let initial_distribution = normalize(&initial).ok_or_else(|| {
        Error::Config(format!(
            "no pick-ups in the first {} epochs; increase the initial window K",
            config.initial_epochs
        ))
    })?;
    let global_mean = dist_sum.iter().sum::<f64>() / trips.len() as f64;
    let global_hist = normalize(&hist.iter().fold(vec![0.0; nbins], |mut acc, row| {
        acc.iter_mut().zip(row).for_each(|(a, r)| *a += r);
        acc
    }))
    .expect("nonempty trips");

    let mut destination = Vec::with_capacity(n);
    let mut fallback = Vec::with_capacity(n);
    let mut distance_histogram = Vec::with_capacity(n);
    let mut mean_trip_distance = Vec::with_capacity(n);
    for c in 0..n {
        match normalize(&dest[c]) {
            Some(row) => {
                destination.push(row);
                fallback.push(false);
                distance_histogram.push(normalize(&hist[c]).expect("same trips"));
                mean_trip_distance.push(dist_sum[c] / pickups[c]);
            }
            None => {
                destination.push(vec![1.0 / n as f64; n]);
                fallback.push(true);
                distance_histogram.push(global_hist.clone());
                mean_trip_distance.push(global_mean);
            }
        }
    }
    let flagged = fallback.iter().filter(|f| **f).count();
    if flagged > 0 {
        log::warn!(
            "{flagged} origin cells have no trips; their destination rows fall back to uniform"
        );
    }
    let model = GridModel {
        grid,
        epoch_minutes: config.epoch_minutes,
        num_epochs,
        demand_rate: pickups.iter().map(|p| p / num_epochs as f64).collect(),
        destination,
        destination_fallback: fallback,
        initial_distribution,
        price_multiplier: multipliers,
        eta: config.eta,
        distance_bins: config.distance_bins.clone(),
        distance_histogram,
        mean_trip_distance,
    };
    model.validate()?;
    Ok(model)
}

/// `row,col,cell,value` rows for a per-cell quantity.
pub fn write_heatmap_csv<W: Write>(writer: W, grid: &GridSpec, values: &[f64]) -> Result<()> {
    if values.len() != grid.num_cells() {
        return Err(Error::DimensionMismatch {
            what: "heat-map values",
            expected: grid.num_cells(),
            got: values.len(),
        });
    }
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["row", "col", "cell", "value"])?;
    for (c, v) in values.iter().enumerate() {
        let (r, k) = grid.row_col(c);
        w.write_record(&[
            r.to_string(),
            k.to_string(),
            c.to_string(),
            crate::solver::format_f64(*v),
        ])?;
    }
    w.flush()?;
    Ok(())
}
