//! Synthetic trip data standing in for the NYC records.
//!
//! Pick-ups concentrate around two hotspots (cells 27 and 73) over a uniform
//! background; drop-offs stay in the same cell, move to a nearby cell or go
//! anywhere. All randomness comes from one ChaCha8 stream seeded with
//! [`SYNTHETIC_FIXTURE_SEED`] unless configured otherwise.

use chrono::{Duration, NaiveDate, NaiveDateTime};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::grid::GridSpec;
use super::ingest::{CleaningRule, TripRecord};
use super::model::{build_grid_model, GridModel, GridModelConfig};
use crate::error::Result;

/// Seed of the shipped synthetic fixture.
pub const SYNTHETIC_FIXTURE_SEED: u64 = 20_160_101;

/// Miles per grid step (0.01° of latitude/longitude at NYC, averaged).
const MILES_PER_CELL: f64 = 0.69;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticFixtureConfig {
    pub seed: u64,
    pub trips: usize,
    /// Pick-up times are uniform over this many hours after midnight.
    pub hours: u32,
    pub hotspots: Vec<usize>,
    /// Share of pick-ups drawn around hotspots rather than uniformly.
    pub hotspot_share: f64,
    pub eta: f64,
}

impl Default for SyntheticFixtureConfig {
    fn default() -> Self {
        Self {
            seed: SYNTHETIC_FIXTURE_SEED,
            trips: 20_000,
            hours: 10,
            hotspots: vec![27, 73],
            hotspot_share: 0.8,
            eta: 2.33,
        }
    }
}

fn day_start() -> NaiveDateTime {
    NaiveDate::from_ymd_opt(2016, 1, 1)
        .expect("valid date")
        .and_hms_opt(0, 0, 0)
        .expect("midnight")
}

fn point_in(grid: &GridSpec, cell: usize, rng: &mut ChaCha8Rng) -> (f64, f64) {
    let (row, col) = grid.row_col(cell);
    let g = grid.granularity;
    let lon = grid.lon_min + (col as f64 + rng.gen_range(0.05..0.95)) * g;
    let lat = grid.lat_min + (row as f64 + rng.gen_range(0.05..0.95)) * g;
    (lon, lat)
}

fn offset_cell(grid: &GridSpec, cell: usize, spread: isize, rng: &mut ChaCha8Rng) -> usize {
    let (row, col) = grid.row_col(cell);
    let r = (row as isize + rng.gen_range(-spread..=spread)).clamp(0, grid.rows() as isize - 1);
    let c = (col as isize + rng.gen_range(-spread..=spread)).clamp(0, grid.cols() as isize - 1);
    r as usize * grid.cols() + c as usize
}

/// Clean synthetic trips on the default grid.
pub fn synthetic_trips(config: &SyntheticFixtureConfig) -> Vec<TripRecord> {
    let grid = GridSpec::default();
    let n = grid.num_cells();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let start = day_start();
    let span = i64::from(config.hours) * 3600;
    (0..config.trips)
        .map(|_| {
            let origin = if !config.hotspots.is_empty() && rng.gen::<f64>() < config.hotspot_share {
                let h = config.hotspots[rng.gen_range(0..config.hotspots.len())];
                offset_cell(&grid, h, 2, &mut rng)
            } else {
                rng.gen_range(0..n)
            };
            let u: f64 = rng.gen();
            let dest = if u < 0.4 {
                origin
            } else if u < 0.8 {
                offset_cell(&grid, origin, 2, &mut rng)
            } else {
                rng.gen_range(0..n)
            };
            let steps = grid.grid_distance(origin, dest);
            let distance = MILES_PER_CELL * steps + rng.gen_range(0.2..0.8);
            let pickup = start + Duration::seconds(rng.gen_range(0..span));
            let minutes = 3.0 + 2.5 * steps + rng.gen_range(0.0..5.0);
            let dropoff = pickup + Duration::seconds((minutes * 60.0) as i64);
            let (plon, plat) = point_in(&grid, origin, &mut rng);
            let (dlon, dlat) = point_in(&grid, dest, &mut rng);
            TripRecord {
                pickup_time: pickup,
                dropoff_time: dropoff,
                pickup_lon: plon,
                pickup_lat: plat,
                dropoff_lon: dlon,
                dropoff_lat: dlat,
                distance,
            }
        })
        .collect()
}

/// Price multipliers peaking at 1.5 on the first hotspot and decaying to 1.
pub fn synthetic_price_multipliers(config: &SyntheticFixtureConfig) -> Vec<f64> {
    let grid = GridSpec::default();
    let peak = config.hotspots.first().copied().unwrap_or(0);
    (0..grid.num_cells())
        .map(|c| {
            let d = grid.grid_distance(c, peak);
            1.0 + 0.5 * (-d * d / 8.0).exp()
        })
        .collect()
}

/// Grid model of the synthetic trips (5-minute epochs, first 3 epochs as the
/// initial window).
pub fn synthetic_grid_model(config: &SyntheticFixtureConfig) -> Result<GridModel> {
    let trips = synthetic_trips(config);
    let model_config = GridModelConfig {
        eta: config.eta,
        price_multiplier: Some(synthetic_price_multipliers(config)),
        ..GridModelConfig::default()
    };
    build_grid_model(&trips, &model_config)
}

/// Hand-built records, each labelled with the rule that must reject it
/// (`None`: must be accepted). Covers every violation class, the edges of
/// each rule and a record violating several rules at once.
pub fn cleaning_fixture() -> Vec<(TripRecord, Option<CleaningRule>)> {
    let t0 = day_start() + Duration::hours(9);
    let rec = |dropoff_secs: i64, plon: f64, plat: f64, dlon: f64, dlat: f64| TripRecord {
        pickup_time: t0,
        dropoff_time: t0 + Duration::seconds(dropoff_secs),
        pickup_lon: plon,
        pickup_lat: plat,
        dropoff_lon: dlon,
        dropoff_lat: dlat,
        distance: 1.0,
    };
    let (lon, lat) = (-73.85, 40.75);
    use CleaningRule::*;
    vec![
        (rec(600, lon, lat, lon, lat), None),
        (rec(60, lon, lat, lon, lat), None),
        (rec(600, -73.9, 40.7, -73.8, 40.8), None),
        (rec(-600, lon, lat, lon, lat), Some(TimestampOrder)),
        (rec(0, lon, lat, lon, lat), Some(TimestampOrder)),
        (rec(-1, -770.4, lat, lon, lat), Some(TimestampOrder)),
        (rec(59, lon, lat, lon, lat), Some(MinimumDuration)),
        (rec(1, -770.4, lat, lon, lat), Some(MinimumDuration)),
        (rec(600, -770.4, lat, lon, lat), Some(BoundingBox)),
        (rec(600, lon, lat, lon, 40.8001), Some(BoundingBox)),
        (rec(600, lon, 0.0, lon, lat), Some(BoundingBox)),
        (rec(600, -73.9001, lat, lon, lat), Some(BoundingBox)),
        (rec(600, lon, lat, f64::NAN, lat), Some(BoundingBox)),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taxi::ingest::{violated_rule, IngestConfig};

    #[test]
    fn fixture_is_deterministic_and_clean() {
        let cfg = SyntheticFixtureConfig {
            trips: 500,
            ..SyntheticFixtureConfig::default()
        };
        let a = synthetic_trips(&cfg);
        assert_eq!(a, synthetic_trips(&cfg));
        let grid = GridSpec::default();
        assert!(a.iter().all(|t| violated_rule(t, &grid, 60).is_none()));
        let m = synthetic_grid_model(&cfg).unwrap();
        assert!(m.demand_rate[27] > m.demand_rate[90]);
    }

    #[test]
    fn cleaning_fixture_labels_match_rules() {
        let cfg = IngestConfig::default();
        for (trip, rule) in cleaning_fixture() {
            assert_eq!(
                violated_rule(&trip, &cfg.grid, cfg.min_duration_secs),
                rule,
                "{trip:?}"
            );
        }
    }
}
