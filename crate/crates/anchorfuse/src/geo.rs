//! Geographic anchors over a gridded embedding field.
//!
//! A [`SpatioTemporalBox`] names a rectangular region (degrees, north-up) and
//! a year. [`make_anchor_grid`] lays a regular lattice of anchor points over
//! the box, [`geo_to_pixel`] maps coordinates to normalized image positions,
//! and [`EmbeddingFieldStore`] answers nearest-neighbor lookups into per-year
//! rasters of 64-dimensional embedding vectors. [`build_feature_set`] ties
//! them together: one embedding per anchor node, tagged with its normalized
//! position, ready to act as a prior batch for token modulation.
//!
//! Per-year rasters persist in the `AEFS` layout (one file per year):
//!
//! ```text
//! magic "AEFS" | version: u8 = 1 | year: i32 LE
//! lon_min lat_min lon_max lat_max: f64 LE
//! cells_x: u32 | cells_y: u32 | dims: u32 (= 64)
//! payload: cells_y × cells_x × 64 f32 LE, northernmost row first
//! ```

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Embedding vector length used throughout the store and feature sets.
pub const EMBED_DIM: usize = 64;

/// Current `AEFS` file version.
pub const AEFS_VERSION: u8 = 1;

/// Errors from geographic validation, store queries, and `AEFS` files.
#[derive(Debug, Error)]
pub enum GeoError {
    #[error("degenerate box: [{lon_min}, {lat_min}, {lon_max}, {lat_max}] (min must be strictly below max)")]
    DegenerateBox {
        lon_min: f64,
        lat_min: f64,
        lon_max: f64,
        lat_max: f64,
    },
    #[error("anchor grid {n_lon}x{n_lat} too small: need at least 2 nodes per axis")]
    GridTooSmall { n_lon: usize, n_lat: usize },
    #[error("point ({lon}, {lat}) lies outside the box")]
    OutOfBox { lon: f64, lat: f64 },
    #[error("point ({lon}, {lat}) lies outside the stored raster for year {year}")]
    OutOfBounds { lon: f64, lat: f64, year: i32 },
    #[error("year {year} not present in store (available: {available:?})")]
    YearUnavailable { year: i32, available: Vec<i32> },
    #[error("bad magic: expected \"AEFS\", found {found:?}")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported AEFS version {0}")]
    UnsupportedVersion(u8),
    #[error("AEFS embedding dimension {0} is not {EMBED_DIM}")]
    BadDims(u32),
    #[error("raster payload length {len} does not match {cells_y} x {cells_x} x {EMBED_DIM}")]
    PayloadMismatch { cells_x: u32, cells_y: u32, len: usize },
    #[error("raster grid {cells_x}x{cells_y} must have at least one cell per axis")]
    EmptyRaster { cells_x: u32, cells_y: u32 },
    #[error("AEFS file truncated while reading {reading}")]
    Truncated { reading: &'static str },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Strict `lo < hi` that also fails when either bound is NaN (incomparable).
fn strictly_below(lo: f64, hi: f64) -> bool {
    matches!(lo.partial_cmp(&hi), Some(std::cmp::Ordering::Less))
}

/// A rectangular geographic region plus acquisition year.
///
/// Longitude grows eastward, latitude grows northward; bounds are inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpatioTemporalBox {
    pub lon_min: f64,
    pub lat_min: f64,
    pub lon_max: f64,
    pub lat_max: f64,
    pub year: i32,
}

impl SpatioTemporalBox {
    /// Validates that both axes have strictly positive extent.
    pub fn new(
        lon_min: f64,
        lat_min: f64,
        lon_max: f64,
        lat_max: f64,
        year: i32,
    ) -> Result<Self, GeoError> {
        if !strictly_below(lon_min, lon_max) || !strictly_below(lat_min, lat_max) {
            return Err(GeoError::DegenerateBox { lon_min, lat_min, lon_max, lat_max });
        }
        Ok(SpatioTemporalBox { lon_min, lat_min, lon_max, lat_max, year })
    }

    /// True when the point lies inside the box (edges inclusive).
    pub fn contains(&self, lon: f64, lat: f64) -> bool {
        lon >= self.lon_min && lon <= self.lon_max && lat >= self.lat_min && lat <= self.lat_max
    }
}

/// One anchor node: geographic position, normalized pixel position, embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorRecord {
    pub lon: f64,
    pub lat: f64,
    /// Normalized horizontal position in `[0, 1]`, west → east.
    pub px: f64,
    /// Normalized vertical position in `[0, 1]`, north → south.
    pub py: f64,
    pub embedding: Vec<f64>,
}

/// Regular lattice of anchor nodes over a box.
///
/// Nodes are ordered latitude-major: the southernmost row (`lat_min`) comes
/// first, and within a row longitude ascends from `lon_min`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorGrid {
    pub n_lon: usize,
    pub n_lat: usize,
    /// `(lon, lat)` per node, `n_lon * n_lat` entries.
    pub nodes: Vec<(f64, f64)>,
}

/// Evenly spaced values from `min` to `max` inclusive.
///
/// Both endpoints are reproduced exactly (bit equality), not just to rounding.
fn linspace(min: f64, max: f64, n: usize) -> Vec<f64> {
    let step = (max - min) / (n - 1) as f64;
    (0..n)
        .map(|i| if i == n - 1 { max } else { min + i as f64 * step })
        .collect()
}

/// Lay an `n_lon x n_lat` lattice of anchor nodes over the box.
///
/// Requires at least two nodes per axis so both edges carry anchors.
pub fn make_anchor_grid(
    bbox: &SpatioTemporalBox,
    n_lon: usize,
    n_lat: usize,
) -> Result<AnchorGrid, GeoError> {
    if n_lon < 2 || n_lat < 2 {
        return Err(GeoError::GridTooSmall { n_lon, n_lat });
    }
    let lons = linspace(bbox.lon_min, bbox.lon_max, n_lon);
    let lats = linspace(bbox.lat_min, bbox.lat_max, n_lat);
    let mut nodes = Vec::with_capacity(n_lon * n_lat);
    for &lat in &lats {
        for &lon in &lons {
            nodes.push((lon, lat));
        }
    }
    Ok(AnchorGrid { n_lon, n_lat, nodes })
}

/// Map geographic coordinates to normalized pixel coordinates in the box.
///
/// `px` runs west → east in `[0, 1]`; `py` runs north → south, so the
/// northern edge (`lat_max`) maps to `py = 0`.
pub fn geo_to_pixel(bbox: &SpatioTemporalBox, lon: f64, lat: f64) -> Result<(f64, f64), GeoError> {
    if !bbox.contains(lon, lat) {
        return Err(GeoError::OutOfBox { lon, lat });
    }
    let px = (lon - bbox.lon_min) / (bbox.lon_max - bbox.lon_min);
    let py = (bbox.lat_max - lat) / (bbox.lat_max - bbox.lat_min);
    Ok((px, py))
}

/// Inverse of [`geo_to_pixel`] for round-trip checks and synthesis.
pub fn pixel_to_geo(bbox: &SpatioTemporalBox, px: f64, py: f64) -> (f64, f64) {
    let lon = bbox.lon_min + px * (bbox.lon_max - bbox.lon_min);
    let lat = bbox.lat_max - py * (bbox.lat_max - bbox.lat_min);
    (lon, lat)
}

/// One year's raster of embedding vectors over a geographic extent.
#[derive(Debug, Clone, PartialEq)]
pub struct YearRaster {
    pub year: i32,
    pub lon_min: f64,
    pub lat_min: f64,
    pub lon_max: f64,
    pub lat_max: f64,
    pub cells_x: u32,
    pub cells_y: u32,
    /// `cells_y * cells_x * EMBED_DIM` values, northernmost row first.
    data: Vec<f32>,
}

impl YearRaster {
    #[allow(clippy::too_many_arguments)] // mirrors the AEFS header fields
    pub fn new(
        year: i32,
        lon_min: f64,
        lat_min: f64,
        lon_max: f64,
        lat_max: f64,
        cells_x: u32,
        cells_y: u32,
        data: Vec<f32>,
    ) -> Result<Self, GeoError> {
        if !strictly_below(lon_min, lon_max) || !strictly_below(lat_min, lat_max) {
            return Err(GeoError::DegenerateBox { lon_min, lat_min, lon_max, lat_max });
        }
        if cells_x == 0 || cells_y == 0 {
            return Err(GeoError::EmptyRaster { cells_x, cells_y });
        }
        let expected = cells_y as usize * cells_x as usize * EMBED_DIM;
        if data.len() != expected {
            return Err(GeoError::PayloadMismatch { cells_x, cells_y, len: data.len() });
        }
        Ok(YearRaster { year, lon_min, lat_min, lon_max, lat_max, cells_x, cells_y, data })
    }

    /// Flat offset of a cell's embedding, row counted from the north edge.
    #[inline]
    pub fn cell_offset(&self, row_north: u32, cx: u32) -> usize {
        (row_north as usize * self.cells_x as usize + cx as usize) * EMBED_DIM
    }

    /// Embedding slice of a cell, row counted from the north edge.
    pub fn cell(&self, row_north: u32, cx: u32) -> &[f32] {
        let off = self.cell_offset(row_north, cx);
        &self.data[off..off + EMBED_DIM]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// True when the point lies inside the raster extent (edges inclusive).
    pub fn contains(&self, lon: f64, lat: f64) -> bool {
        lon >= self.lon_min && lon <= self.lon_max && lat >= self.lat_min && lat <= self.lat_max
    }

    /// Nearest-neighbor cell for a point inside the extent.
    ///
    /// Continuous coordinates floor to a cell index; points on the far edges
    /// clamp into the last cell so the inclusive boundary stays queryable.
    pub fn cell_of(&self, lon: f64, lat: f64) -> (u32, u32) {
        let fx = (lon - self.lon_min) / (self.lon_max - self.lon_min) * self.cells_x as f64;
        let fy = (self.lat_max - lat) / (self.lat_max - self.lat_min) * self.cells_y as f64;
        let cx = (fx.floor() as i64).clamp(0, self.cells_x as i64 - 1) as u32;
        let ry = (fy.floor() as i64).clamp(0, self.cells_y as i64 - 1) as u32;
        (ry, cx)
    }

    /// Serialize in the `AEFS` layout.
    pub fn write_aefs(&self, w: &mut impl Write) -> Result<(), GeoError> {
        w.write_all(b"AEFS")?;
        w.write_all(&[AEFS_VERSION])?;
        w.write_all(&self.year.to_le_bytes())?;
        for v in [self.lon_min, self.lat_min, self.lon_max, self.lat_max] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&self.cells_x.to_le_bytes())?;
        w.write_all(&self.cells_y.to_le_bytes())?;
        w.write_all(&(EMBED_DIM as u32).to_le_bytes())?;
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    /// Deserialize from the `AEFS` layout.
    pub fn read_aefs(r: &mut impl Read) -> Result<Self, GeoError> {
        fn fill(r: &mut impl Read, buf: &mut [u8], reading: &'static str) -> Result<(), GeoError> {
            r.read_exact(buf).map_err(|e| {
                if e.kind() == io::ErrorKind::UnexpectedEof {
                    GeoError::Truncated { reading }
                } else {
                    GeoError::Io(e)
                }
            })
        }

        let mut magic = [0u8; 4];
        fill(r, &mut magic, "magic")?;
        if &magic != b"AEFS" {
            return Err(GeoError::BadMagic { found: magic });
        }
        let mut b1 = [0u8; 1];
        fill(r, &mut b1, "version")?;
        if b1[0] != AEFS_VERSION {
            return Err(GeoError::UnsupportedVersion(b1[0]));
        }
        let mut b4 = [0u8; 4];
        fill(r, &mut b4, "year")?;
        let year = i32::from_le_bytes(b4);
        let mut bounds = [0.0f64; 4];
        let mut b8 = [0u8; 8];
        for v in bounds.iter_mut() {
            fill(r, &mut b8, "bounds")?;
            *v = f64::from_le_bytes(b8);
        }
        fill(r, &mut b4, "cells_x")?;
        let cells_x = u32::from_le_bytes(b4);
        fill(r, &mut b4, "cells_y")?;
        let cells_y = u32::from_le_bytes(b4);
        fill(r, &mut b4, "dims")?;
        let dims = u32::from_le_bytes(b4);
        if dims != EMBED_DIM as u32 {
            return Err(GeoError::BadDims(dims));
        }
        if cells_x == 0 || cells_y == 0 {
            return Err(GeoError::EmptyRaster { cells_x, cells_y });
        }
        let count = cells_y as usize * cells_x as usize * EMBED_DIM;
        let mut data = Vec::with_capacity(count);
        for _ in 0..count {
            fill(r, &mut b4, "payload")?;
            data.push(f32::from_le_bytes(b4));
        }
        YearRaster::new(
            year, bounds[0], bounds[1], bounds[2], bounds[3], cells_x, cells_y, data,
        )
    }

    pub fn write_aefs_file(&self, path: &Path) -> Result<(), GeoError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_aefs(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_aefs_file(path: &Path) -> Result<Self, GeoError> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read_aefs(&mut r)
    }
}

/// Collection of per-year rasters answering point queries.
#[derive(Debug, Clone, Default)]
pub struct EmbeddingFieldStore {
    rasters: BTreeMap<i32, YearRaster>,
}

impl EmbeddingFieldStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Add or replace the raster for its year.
    pub fn insert(&mut self, raster: YearRaster) {
        self.rasters.insert(raster.year, raster);
    }

    /// Years present, ascending.
    pub fn years(&self) -> Vec<i32> {
        self.rasters.keys().copied().collect()
    }

    pub fn raster(&self, year: i32) -> Option<&YearRaster> {
        self.rasters.get(&year)
    }

    /// Load a store from one `AEFS` file per year.
    pub fn load_files<P: AsRef<Path>>(paths: impl IntoIterator<Item = P>) -> Result<Self, GeoError> {
        let mut store = Self::new();
        for p in paths {
            store.insert(YearRaster::read_aefs_file(p.as_ref())?);
        }
        Ok(store)
    }

    /// Nearest-neighbor embedding lookup at a point for a year.
    pub fn query(&self, lon: f64, lat: f64, year: i32) -> Result<&[f32], GeoError> {
        let raster = self.rasters.get(&year).ok_or_else(|| GeoError::YearUnavailable {
            year,
            available: self.years(),
        })?;
        if !raster.contains(lon, lat) {
            return Err(GeoError::OutOfBounds { lon, lat, year });
        }
        let (ry, cx) = raster.cell_of(lon, lat);
        Ok(raster.cell(ry, cx))
    }
}

/// Anchor embeddings extracted for one box, ready to modulate a token grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorFeatureSet {
    pub bbox: SpatioTemporalBox,
    pub n_lon: usize,
    pub n_lat: usize,
    pub records: Vec<AnchorRecord>,
}

impl AnchorFeatureSet {
    /// Compact JSON, trailing newline; stable byte-for-byte across runs.
    pub fn to_json_string(&self) -> String {
        let mut s = serde_json::to_string(self).expect("feature set serializes");
        s.push('\n');
        s
    }

    pub fn save_json(&self, path: &Path) -> Result<(), io::Error> {
        std::fs::write(path, self.to_json_string())
    }

    pub fn load_json(path: &Path) -> Result<Self, io::Error> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
    }
}

/// Extract one embedding per anchor node of an `n_lon x n_lat` grid.
///
/// Record order follows the grid's latitude-major node order. Fails when the
/// grid is too small, the box's year is absent, or any node falls outside the
/// stored raster.
pub fn build_feature_set(
    bbox: &SpatioTemporalBox,
    n_lon: usize,
    n_lat: usize,
    store: &EmbeddingFieldStore,
) -> Result<AnchorFeatureSet, GeoError> {
    let grid = make_anchor_grid(bbox, n_lon, n_lat)?;
    let mut records = Vec::with_capacity(grid.nodes.len());
    for &(lon, lat) in &grid.nodes {
        let embedding = store.query(lon, lat, bbox.year)?;
        let (px, py) = geo_to_pixel(bbox, lon, lat)?;
        records.push(AnchorRecord {
            lon,
            lat,
            px,
            py,
            embedding: embedding.iter().map(|&v| v as f64).collect(),
        });
    }
    Ok(AnchorFeatureSet { bbox: *bbox, n_lon, n_lat, records })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit_box(year: i32) -> SpatioTemporalBox {
        SpatioTemporalBox::new(0.0, 0.0, 1.0, 1.0, year).unwrap()
    }

    /// A 2x2 raster whose cell embeddings are constant and identify the cell:
    /// value 10*row_north + cx in every component.
    fn quadrant_raster() -> YearRaster {
        let mut data = vec![0.0f32; 2 * 2 * EMBED_DIM];
        for ry in 0..2u32 {
            for cx in 0..2u32 {
                let v = (10 * ry + cx) as f32;
                let off = (ry as usize * 2 + cx as usize) * EMBED_DIM;
                for d in 0..EMBED_DIM {
                    data[off + d] = v;
                }
            }
        }
        YearRaster::new(2020, 0.0, 0.0, 1.0, 1.0, 2, 2, data).unwrap()
    }

    #[test]
    fn three_node_grid_on_unit_box() {
        let grid = make_anchor_grid(&unit_box(2020), 3, 3).unwrap();
        assert_eq!(grid.nodes.len(), 9);
        // Latitude-major from the south: first row lat 0, lons 0, 0.5, 1.
        assert_eq!(grid.nodes[0], (0.0, 0.0));
        assert_eq!(grid.nodes[1], (0.5, 0.0));
        assert_eq!(grid.nodes[2], (1.0, 0.0));
        assert_eq!(grid.nodes[8], (1.0, 1.0));
    }

    #[test]
    fn degenerate_boxes_and_small_grids_are_rejected() {
        assert!(matches!(
            SpatioTemporalBox::new(1.0, 0.0, 1.0, 2.0, 2020),
            Err(GeoError::DegenerateBox { .. })
        ));
        assert!(matches!(
            SpatioTemporalBox::new(0.0, 3.0, 1.0, 2.0, 2020),
            Err(GeoError::DegenerateBox { .. })
        ));
        assert!(matches!(
            make_anchor_grid(&unit_box(2020), 1, 5),
            Err(GeoError::GridTooSmall { .. })
        ));
    }

    #[test]
    fn pixel_mapping_is_north_up() {
        let b = SpatioTemporalBox::new(10.0, 40.0, 20.0, 50.0, 2021).unwrap();
        // Northwest corner: minimum lon, maximum lat -> (0, 0).
        assert_eq!(geo_to_pixel(&b, 10.0, 50.0).unwrap(), (0.0, 0.0));
        // Southeast corner -> (1, 1).
        assert_eq!(geo_to_pixel(&b, 20.0, 40.0).unwrap(), (1.0, 1.0));
        let (px, py) = geo_to_pixel(&b, 12.5, 47.5).unwrap();
        assert!((px - 0.25).abs() < 1e-15);
        assert!((py - 0.25).abs() < 1e-15);
        assert!(matches!(
            geo_to_pixel(&b, 9.0, 45.0),
            Err(GeoError::OutOfBox { .. })
        ));
    }

    #[test]
    fn quadrant_store_returns_the_surrounding_cell() {
        let mut store = EmbeddingFieldStore::new();
        store.insert(quadrant_raster());
        let eps = 1e-9;
        // (lon just east of 0, lat just south of 1) -> northwest cell (0,0).
        assert_eq!(store.query(eps, 1.0 - eps, 2020).unwrap()[0], 0.0);
        // Northeast cell.
        assert_eq!(store.query(1.0 - eps, 1.0 - eps, 2020).unwrap()[0], 1.0);
        // Southwest cell.
        assert_eq!(store.query(eps, eps, 2020).unwrap()[0], 10.0);
        // Southeast cell.
        assert_eq!(store.query(1.0 - eps, eps, 2020).unwrap()[0], 11.0);
        // Inclusive far edges clamp into the last cell instead of erroring.
        assert_eq!(store.query(1.0, 0.0, 2020).unwrap()[0], 11.0);
    }

    #[test]
    fn missing_year_and_outside_point_error() {
        let mut store = EmbeddingFieldStore::new();
        store.insert(quadrant_raster());
        assert!(matches!(
            store.query(0.5, 0.5, 1999),
            Err(GeoError::YearUnavailable { year: 1999, .. })
        ));
        assert!(matches!(
            store.query(2.0, 0.5, 2020),
            Err(GeoError::OutOfBounds { .. })
        ));
    }

    #[test]
    fn feature_set_follows_grid_order_and_positions() {
        let mut store = EmbeddingFieldStore::new();
        store.insert(quadrant_raster());
        let b = unit_box(2020);
        let fs = build_feature_set(&b, 2, 2, &store).unwrap();
        assert_eq!(fs.records.len(), 4);
        // First record: node (lon 0, lat 0) = southwest -> py = 1, cell value 10.
        assert_eq!((fs.records[0].px, fs.records[0].py), (0.0, 1.0));
        assert_eq!(fs.records[0].embedding[0], 10.0);
        // Last record: node (lon 1, lat 1) = northeast -> py = 0, cell clamps east.
        assert_eq!((fs.records[3].px, fs.records[3].py), (1.0, 0.0));
        assert_eq!(fs.records[3].embedding[0], 1.0);
        assert!(fs.records.iter().all(|r| r.embedding.len() == EMBED_DIM));
    }

    #[test]
    fn feature_set_extraction_is_byte_deterministic() {
        let mut store = EmbeddingFieldStore::new();
        store.insert(quadrant_raster());
        let b = SpatioTemporalBox::new(0.1, 0.2, 0.9, 0.8, 2020).unwrap();
        let a = build_feature_set(&b, 4, 3, &store).unwrap().to_json_string();
        let c = build_feature_set(&b, 4, 3, &store).unwrap().to_json_string();
        assert_eq!(a, c);
    }

    #[test]
    fn aefs_round_trip_is_byte_identical() {
        let raster = quadrant_raster();
        let mut bytes = Vec::new();
        raster.write_aefs(&mut bytes).unwrap();
        let back = YearRaster::read_aefs(&mut bytes.as_slice()).unwrap();
        assert_eq!(back, raster);
        let mut again = Vec::new();
        back.write_aefs(&mut again).unwrap();
        assert_eq!(bytes, again);
    }

    #[test]
    fn aefs_rejects_corruption() {
        let raster = quadrant_raster();
        let mut bytes = Vec::new();
        raster.write_aefs(&mut bytes).unwrap();

        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'Z';
        assert!(matches!(
            YearRaster::read_aefs(&mut bad_magic.as_slice()),
            Err(GeoError::BadMagic { .. })
        ));

        let mut bad_version = bytes.clone();
        bad_version[4] = 9;
        assert!(matches!(
            YearRaster::read_aefs(&mut bad_version.as_slice()),
            Err(GeoError::UnsupportedVersion(9))
        ));

        // dims field sits after magic(4) + version(1) + year(4) + bounds(32) + cells(8).
        let mut bad_dims = bytes.clone();
        bad_dims[49] = 63;
        assert!(matches!(
            YearRaster::read_aefs(&mut bad_dims.as_slice()),
            Err(GeoError::BadDims(63))
        ));

        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(
            YearRaster::read_aefs(&mut &cut[..]),
            Err(GeoError::Truncated { .. })
        ));
    }

    proptest! {
        /// Grid endpoints reproduce the box corners with bit equality, and
        /// interior nodes match an independently computed affine blend.
        #[test]
        fn grid_nodes_match_affine_oracle(
            lon_min in -180.0f64..179.0,
            lat_min in -90.0f64..89.0,
            dlon in 0.1f64..10.0,
            dlat in 0.1f64..10.0,
            n_lon in 2usize..12,
            n_lat in 2usize..12,
        ) {
            let b = SpatioTemporalBox::new(lon_min, lat_min, lon_min + dlon, lat_min + dlat, 2020).unwrap();
            let grid = make_anchor_grid(&b, n_lon, n_lat).unwrap();
            prop_assert_eq!(grid.nodes.len(), n_lon * n_lat);
            // Exact corners.
            prop_assert_eq!(grid.nodes[0].0.to_bits(), b.lon_min.to_bits());
            prop_assert_eq!(grid.nodes[n_lon - 1].0.to_bits(), b.lon_max.to_bits());
            prop_assert_eq!(grid.nodes[0].1.to_bits(), b.lat_min.to_bits());
            prop_assert_eq!(grid.nodes[(n_lat - 1) * n_lon].1.to_bits(), b.lat_max.to_bits());
            // Interior nodes vs. an independent formula: min*(1-t) + max*t.
            for j in 0..n_lat {
                for i in 0..n_lon {
                    let (lon, lat) = grid.nodes[j * n_lon + i];
                    let ti = i as f64 / (n_lon - 1) as f64;
                    let tj = j as f64 / (n_lat - 1) as f64;
                    let lon_oracle = b.lon_min * (1.0 - ti) + b.lon_max * ti;
                    let lat_oracle = b.lat_min * (1.0 - tj) + b.lat_max * tj;
                    prop_assert!((lon - lon_oracle).abs() <= 1e-12 * dlon.max(1.0));
                    prop_assert!((lat - lat_oracle).abs() <= 1e-12 * dlat.max(1.0));
                }
            }
        }

        /// geo -> pixel -> geo returns to the starting point within 1e-12.
        #[test]
        fn pixel_round_trip(
            lon_min in -180.0f64..170.0,
            lat_min in -90.0f64..80.0,
            dlon in 0.1f64..10.0,
            dlat in 0.1f64..10.0,
            u in 0.0f64..=1.0,
            v in 0.0f64..=1.0,
        ) {
            let b = SpatioTemporalBox::new(lon_min, lat_min, lon_min + dlon, lat_min + dlat, 2020).unwrap();
            let lon = b.lon_min + u * dlon;
            let lat = b.lat_min + v * dlat;
            let lon = lon.min(b.lon_max);
            let lat = lat.min(b.lat_max);
            let (px, py) = geo_to_pixel(&b, lon, lat).unwrap();
            prop_assert!((0.0..=1.0).contains(&px) && (0.0..=1.0).contains(&py));
            let (lon2, lat2) = pixel_to_geo(&b, px, py);
            prop_assert!((lon2 - lon).abs() <= 1e-12);
            prop_assert!((lat2 - lat).abs() <= 1e-12);
        }
    }
}
