//! Rectangular lon/lat grid with row-major cell indices.
//!
//! ```text
//! col = ⌊(lon − lon_min)/g⌋,  row = ⌊(lat − lat_min)/g⌋,  cell = row·cols + col
//! ```
//!
//! Lower edges are inclusive and upper edges exclusive, except that the box
//! maximum folds into the last row/column.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Absorbs decimal-to-binary rounding so that e.g. `40.71` lands in row 1.
const EDGE_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub lon_min: f64,
    pub lon_max: f64,
    pub lat_min: f64,
    pub lat_max: f64,
    pub granularity: f64,
}

impl Default for GridSpec {
    /// The Manhattan/Queens box at 0.01°: a 10×10 grid.
    fn default() -> Self {
        Self {
            lon_min: -73.9,
            lon_max: -73.8,
            lat_min: 40.7,
            lat_max: 40.8,
            granularity: 0.01,
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = [
            self.lon_min,
            self.lon_max,
            self.lat_min,
            self.lat_max,
            self.granularity,
        ]
        .iter()
        .all(|v| v.is_finite())
            && self.lon_max > self.lon_min
            && self.lat_max > self.lat_min
            && self.granularity > 0.0;
        if !ok || self.cols() == 0 || self.rows() == 0 {
            return Err(Error::Config(format!(
                "invalid grid specification {self:?}"
            )));
        }
        Ok(())
    }

    pub fn cols(&self) -> usize {
        ((self.lon_max - self.lon_min) / self.granularity).round() as usize
    }

    pub fn rows(&self) -> usize {
        ((self.lat_max - self.lat_min) / self.granularity).round() as usize
    }

    pub fn num_cells(&self) -> usize {
        self.rows() * self.cols()
    }

    pub fn contains(&self, lon: f64, lat: f64) -> bool {
        lon.is_finite()
            && lat.is_finite()
            && (self.lon_min..=self.lon_max).contains(&lon)
            && (self.lat_min..=self.lat_max).contains(&lat)
    }

    fn bin(x: f64, min: f64, g: f64, n: usize) -> usize {
        let k = ((x - min) / g + EDGE_EPS).floor().max(0.0) as usize;
        k.min(n - 1)
    }

    /// Row-major index of the cell containing `(lon, lat)`.
    pub fn bin_to_cell(&self, lon: f64, lat: f64) -> Result<usize> {
        if !self.contains(lon, lat) {
            return Err(Error::OutOfBox { lon, lat });
        }
        let col = Self::bin(lon, self.lon_min, self.granularity, self.cols());
        let row = Self::bin(lat, self.lat_min, self.granularity, self.rows());
        Ok(row * self.cols() + col)
    }

    pub fn row_col(&self, cell: usize) -> (usize, usize) {
        (cell / self.cols(), cell % self.cols())
    }

    /// `(lon, lat)` of the cell centre.
    pub fn cell_center(&self, cell: usize) -> Result<(f64, f64)> {
        if cell >= self.num_cells() {
            return Err(Error::IndexOutOfRange {
                what: "grid cell",
                index: cell,
                size: self.num_cells(),
            });
        }
        let (row, col) = self.row_col(cell);
        let g = self.granularity;
        Ok((
            self.lon_min + (col as f64 + 0.5) * g,
            self.lat_min + (row as f64 + 0.5) * g,
        ))
    }

    /// Manhattan distance between two cells, in cells.
    pub fn grid_distance(&self, a: usize, b: usize) -> f64 {
        let (ra, ca) = self.row_col(a);
        let (rb, cb) = self.row_col(b);
        (ra.abs_diff(rb) + ca.abs_diff(cb)) as f64
    }
}

/// Row-major cell of `(lon, lat)` on `grid`.
pub fn bin_to_cell(lon: f64, lat: f64, grid: &GridSpec) -> Result<usize> {
    grid.bin_to_cell(lon, lat)
}
