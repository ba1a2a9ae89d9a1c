//! Gridded masked fields: discretisation of raw records, coverage,
//! sliding windows, the 5:1:1 split and the `STPF` file format.

use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::checkpoint::{check_header, Reader};

const EARTH_RADIUS_M: f64 = 6_371_008.8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub origin_lat: f64,
    pub origin_lon: f64,
    /// Cell edge, meters.
    pub cell_size: f64,
    /// Slice length, seconds.
    pub slice_length: f64,
    pub x: usize,
    pub y: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec { origin_lat: 31.65, origin_lon: 120.74, cell_size: 500.0, slice_length: 3600.0, x: 10, y: 10 }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.x == 0 || self.y == 0 {
            return Err(Error::config(format!("grid must have X, Y >= 1, got {}x{}", self.x, self.y)));
        }
        if !(self.cell_size > 0.0 && self.cell_size.is_finite()) {
            return Err(Error::config(format!("cell size must be positive, got {}", self.cell_size)));
        }
        if !(self.slice_length > 0.0 && self.slice_length.is_finite()) {
            return Err(Error::config(format!("slice length must be positive, got {}", self.slice_length)));
        }
        if !self.origin_lat.is_finite() || !self.origin_lon.is_finite() {
            return Err(Error::config("grid origin must be finite"));
        }
        Ok(())
    }

    pub fn cells(&self) -> usize {
        self.x * self.y
    }

    /// Flat index of cell `(x, y)`, row-major over `(X, Y)`.
    #[inline]
    pub fn cell(&self, x: usize, y: usize) -> usize {
        x * self.y + y
    }

    /// Cell containing a point, by local equirectangular projection from the origin.
    pub fn cell_of(&self, lat: f64, lon: f64) -> Option<(usize, usize)> {
        let east = (lon - self.origin_lon).to_radians() * self.origin_lat.to_radians().cos() * EARTH_RADIUS_M;
        let north = (lat - self.origin_lat).to_radians() * EARTH_RADIUS_M;
        let cx = (east / self.cell_size).floor();
        let cy = (north / self.cell_size).floor();
        if cx < 0.0 || cy < 0.0 || cx >= self.x as f64 || cy >= self.y as f64 || !cx.is_finite() || !cy.is_finite() {
            return None;
        }
        Some((cx as usize, cy as usize))
    }

    /// Latitude and longitude of a cell centre.
    pub fn center_of(&self, x: usize, y: usize) -> (f64, f64) {
        let east = (x as f64 + 0.5) * self.cell_size;
        let north = (y as f64 + 0.5) * self.cell_size;
        let lat = self.origin_lat + (north / EARTH_RADIUS_M).to_degrees();
        let lon = self.origin_lon + (east / (EARTH_RADIUS_M * self.origin_lat.to_radians().cos())).to_degrees();
        (lat, lon)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawRecord {
    pub device_id: String,
    pub timestamp: i64,
    pub lon: f64,
    pub lat: f64,
    pub value: f64,
}

/// Reads records from CSV with header `device_id,timestamp,lon,lat,value`.
pub fn read_records(reader: impl Read) -> Result<Vec<RawRecord>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers().map_err(csv_err)?.clone();
    let want = ["device_id", "timestamp", "lon", "lat", "value"];
    if headers.iter().collect::<Vec<_>>() != want {
        return Err(Error::Format(format!("CSV header must be `{}`", want.join(","))));
    }
    rdr.deserialize()
        .enumerate()
        .map(|(i, r)| r.map_err(|e| Error::RecordRejected { index: i, reason: e.to_string() }))
        .collect()
}

pub fn write_records(path: impl AsRef<Path>, records: &[RawRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in records {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("CSV: {e}"))
}

/// Dense `L x X x Y` values with a matching observation mask.
///
/// Unobserved entries hold 0.0 and must not be read as measurements.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedField {
    pub grid: GridSpec,
    pub slices: usize,
    pub values: Vec<f64>,
    pub mask: Vec<bool>,
}

impl MaskedField {
    pub fn empty(grid: GridSpec, slices: usize) -> Self {
        let n = slices * grid.cells();
        MaskedField { grid, slices, values: vec![0.0; n], mask: vec![false; n] }
    }

    pub fn new(grid: GridSpec, slices: usize, values: Vec<f64>, mask: Vec<bool>) -> Result<Self> {
        let n = slices * grid.cells();
        if values.len() != n || mask.len() != n {
            return Err(Error::dim(format!(
                "field {slices}x{}x{} needs {n} entries, got {} values and {} mask bits",
                grid.x,
                grid.y,
                values.len(),
                mask.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite field value at flat index {i}")));
        }
        let mut f = MaskedField { grid, slices, values, mask };
        f.clear_unobserved();
        Ok(f)
    }

    /// Fully observed field.
    pub fn observed(grid: GridSpec, slices: usize, values: Vec<f64>) -> Result<Self> {
        let n = values.len();
        Self::new(grid, slices, values, vec![true; n])
    }

    pub fn cells(&self) -> usize {
        self.grid.cells()
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.slices, self.grid.x, self.grid.y]
    }

    #[inline]
    pub fn index(&self, l: usize, x: usize, y: usize) -> usize {
        l * self.cells() + self.grid.cell(x, y)
    }

    pub fn slice_values(&self, l: usize) -> &[f64] {
        let k = self.cells();
        &self.values[l * k..(l + 1) * k]
    }

    pub fn slice_mask(&self, l: usize) -> &[bool] {
        let k = self.cells();
        &self.mask[l * k..(l + 1) * k]
    }

    /// Forces the sentinel under every unobserved entry.
    pub fn clear_unobserved(&mut self) {
        for (v, &m) in self.values.iter_mut().zip(&self.mask) {
            if !m {
                *v = 0.0;
            }
        }
    }

    /// Slices `start..end` as a new field.
    pub fn range(&self, start: usize, end: usize) -> MaskedField {
        let k = self.cells();
        MaskedField {
            grid: self.grid,
            slices: end - start,
            values: self.values[start * k..end * k].to_vec(),
            mask: self.mask[start * k..end * k].to_vec(),
        }
    }

    /// Concatenates fields along time.
    pub fn concat(parts: &[MaskedField]) -> Result<MaskedField> {
        let first = parts.first().ok_or_else(|| Error::Usage("nothing to concatenate".into()))?;
        let mut out = MaskedField::empty(first.grid, 0);
        for p in parts {
            if p.grid != first.grid {
                return Err(Error::dim("fields to concatenate have different grids"));
            }
            out.slices += p.slices;
            out.values.extend_from_slice(&p.values);
            out.mask.extend_from_slice(&p.mask);
        }
        Ok(out)
    }

    pub fn density(&self) -> f64 {
        if self.mask.is_empty() {
            return 0.0;
        }
        self.mask.iter().filter(|&&m| m).count() as f64 / self.mask.len() as f64
    }

    pub fn observed_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Mean and population standard deviation over observed entries.
    pub fn observed_stats(&self) -> Option<(f64, f64)> {
        let n = self.observed_count();
        if n == 0 {
            return None;
        }
        let obs = || self.values.iter().zip(&self.mask).filter(|(_, &m)| m).map(|(v, _)| *v);
        let mean = obs().sum::<f64>() / n as f64;
        let var = obs().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        Some((mean, var.sqrt()))
    }
}

/// Averages records into cells and slices of `[t0, t0 + L * slice_length)`.
pub fn discretize(records: &[RawRecord], grid: &GridSpec, t0: i64, slices: usize) -> Result<MaskedField> {
    grid.validate()?;
    if slices == 0 {
        return Err(Error::config("slice count L must be positive"));
    }
    let k = grid.cells();
    let mut sum = vec![0.0; slices * k];
    let mut count = vec![0u32; slices * k];
    let span = slices as f64 * grid.slice_length;
    for (i, r) in records.iter().enumerate() {
        let reject = |reason: String| Error::RecordRejected { index: i, reason };
        if !(r.value >= 0.0 && r.value.is_finite()) {
            return Err(reject(format!("value {} is not a finite non-negative reading", r.value)));
        }
        let dt = (r.timestamp - t0) as f64;
        if dt < 0.0 || dt >= span {
            return Err(reject(format!("timestamp {} outside [{t0}, {t0}+{span}s)", r.timestamp)));
        }
        let (x, y) = grid
            .cell_of(r.lat, r.lon)
            .ok_or_else(|| reject(format!("position ({}, {}) outside the grid", r.lat, r.lon)))?;
        let l = ((dt / grid.slice_length).floor() as usize).min(slices - 1);
        let idx = l * k + grid.cell(x, y);
        sum[idx] += r.value;
        count[idx] += 1;
    }
    let values = sum.iter().zip(&count).map(|(s, &c)| if c > 0 { s / c as f64 } else { 0.0 }).collect();
    let mask = count.iter().map(|&c| c > 0).collect();
    Ok(MaskedField { grid: *grid, slices, values, mask })
}

/// Per-slice spatial coverage and per-cell temporal coverage.
pub fn coverage_stats(field: &MaskedField) -> (Vec<f64>, Vec<f64>) {
    let k = field.cells();
    let spatial = (0..field.slices)
        .map(|l| field.slice_mask(l).iter().filter(|&&m| m).count() as f64 / k as f64)
        .collect();
    let mut temporal = vec![0.0; k];
    for l in 0..field.slices {
        for (t, &m) in temporal.iter_mut().zip(field.slice_mask(l)) {
            if m {
                *t += 1.0;
            }
        }
    }
    let denom = field.slices.max(1) as f64;
    temporal.iter_mut().for_each(|t| *t /= denom);
    (spatial, temporal)
}

/// One history/target pair; arrays are `[slice][cell]` flattened.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowSample {
    pub start: usize,
    pub l1: usize,
    pub l2: usize,
    pub cells: usize,
    pub v_co: Vec<f64>,
    pub m_co: Vec<bool>,
    pub v_ta: Vec<f64>,
    pub m_ta: Vec<bool>,
    pub v_de: Option<Vec<f64>>,
}

impl WindowSample {
    /// The same window with targets hidden, as seen at forecasting time.
    pub fn for_forecast(&self) -> WindowSample {
        WindowSample {
            v_ta: vec![0.0; self.v_ta.len()],
            m_ta: vec![false; self.m_ta.len()],
            v_de: None,
            ..self.clone()
        }
    }
}

pub const DEFAULT_L1: usize = 12;
pub const DEFAULT_L2: usize = 12;

/// Stride-1 windows; there are `L - (l1 + l2) + 1` of them.
pub fn sliding_windows(field: &MaskedField, l1: usize, l2: usize) -> Result<Vec<WindowSample>> {
    if l1 == 0 || l2 == 0 {
        return Err(Error::config("window lengths must be positive"));
    }
    let w = l1 + l2;
    if field.slices < w {
        return Err(Error::InsufficientData(format!(
            "field has {} slices, windows need {w}",
            field.slices
        )));
    }
    let k = field.cells();
    Ok((0..=field.slices - w)
        .map(|s| {
            let co = s * k..(s + l1) * k;
            let ta = (s + l1) * k..(s + w) * k;
            WindowSample {
                start: s,
                l1,
                l2,
                cells: k,
                v_co: field.values[co.clone()].to_vec(),
                m_co: field.mask[co].to_vec(),
                v_ta: field.values[ta.clone()].to_vec(),
                m_ta: field.mask[ta].to_vec(),
                v_de: None,
            }
        })
        .collect())
}

/// Slice counts of the contiguous 5:1:1 split of `l` slices.
pub fn split_sizes(l: usize) -> (usize, usize, usize) {
    let part = l / 7;
    (l - 2 * part, part, part)
}

/// Contiguous train/val/test split along time.
pub fn split_5_1_1(field: &MaskedField) -> Result<(MaskedField, MaskedField, MaskedField)> {
    if field.slices < 7 {
        return Err(Error::InsufficientData(format!("cannot split {} slices 5:1:1", field.slices)));
    }
    let (tr, va, _) = split_sizes(field.slices);
    let min = 7 * (DEFAULT_L1 + DEFAULT_L2) / 5;
    if field.slices < min {
        log::warn!("{} slices is short for a 5:1:1 split with 12+12 windows (want >= {min})", field.slices);
    }
    Ok((field.range(0, tr), field.range(tr, tr + va), field.range(tr + va, field.slices)))
}

const FIELD_MAGIC: &[u8; 4] = b"STPF";
const FIELD_VERSION: u32 = 1;

pub fn encode_field(field: &MaskedField) -> Vec<u8> {
    let n = field.values.len();
    let mut out = Vec::with_capacity(52 + 9 * n);
    out.extend_from_slice(FIELD_MAGIC);
    out.extend_from_slice(&FIELD_VERSION.to_le_bytes());
    for d in [field.slices, field.grid.x, field.grid.y] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in [field.grid.origin_lat, field.grid.origin_lon, field.grid.cell_size, field.grid.slice_length] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in &field.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend(field.mask.iter().map(|&m| m as u8));
    out
}

pub fn decode_field(bytes: &[u8]) -> Result<MaskedField> {
    let mut r = Reader::new(bytes);
    check_header(&mut r, FIELD_MAGIC, FIELD_VERSION)?;
    let l = r.u32()? as usize;
    let x = r.u32()? as usize;
    let y = r.u32()? as usize;
    let grid = GridSpec {
        origin_lat: r.f64()?,
        origin_lon: r.f64()?,
        cell_size: r.f64()?,
        slice_length: r.f64()?,
        x,
        y,
    };
    let n = l
        .checked_mul(x)
        .and_then(|v| v.checked_mul(y))
        .ok_or_else(|| Error::Corrupt("field dimensions overflow".into()))?;
    if r.remaining() != n * 9 {
        return Err(Error::Corrupt(format!(
            "payload holds {} bytes, a {l}x{x}x{y} field needs {}",
            r.remaining(),
            n * 9
        )));
    }
    let values = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
    let mask = r
        .take(n)?
        .iter()
        .enumerate()
        .map(|(i, &b)| match b {
            0 => Ok(false),
            1 => Ok(true),
            _ => Err(Error::Corrupt(format!("mask byte {i} is {b}, expected 0 or 1"))),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MaskedField { grid, slices: l, values, mask })
}

pub fn persist_field(field: &MaskedField, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_field(field))?;
    Ok(())
}

pub fn load_field(path: impl AsRef<Path>) -> Result<MaskedField> {
    decode_field(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(value: f64, lat: f64, lon: f64, ts: i64) -> RawRecord {
        RawRecord { device_id: "bus-1".into(), timestamp: ts, lon, lat, value }
    }

    #[test]
    fn two_records_average() {
        let g = GridSpec::default();
        let (lat, lon) = g.center_of(3, 4);
        let f = discretize(&[rec(40.0, lat, lon, 10), rec(60.0, lat, lon, 20)], &g, 0, 2).unwrap();
        let i = f.index(0, 3, 4);
        assert_eq!((f.values[i], f.mask[i]), (50.0, true));
        assert_eq!(f.observed_count(), 1);
        assert_eq!(f.values.iter().filter(|&&v| v != 0.0).count(), 1);
    }

    #[test]
    fn default_shape_and_rejections() {
        let g = GridSpec::default();
        let f = discretize(&[], &g, 0, 336).unwrap();
        assert_eq!(f.shape(), [336, 10, 10]);
        assert!(matches!(discretize(&[], &g, 0, 0), Err(Error::Config(_))));
        let (lat, lon) = g.center_of(0, 0);
        let late = rec(1.0, lat, lon, 3600 * 2);
        assert!(matches!(
            discretize(&[rec(1.0, lat, lon, 0), late], &g, 0, 2),
            Err(Error::RecordRejected { index: 1, .. })
        ));
        let outside = rec(1.0, g.origin_lat - 0.01, lon, 0);
        assert!(matches!(discretize(&[outside], &g, 0, 2), Err(Error::RecordRejected { index: 0, .. })));
    }

    #[test]
    fn center_maps_back_to_cell() {
        let g = GridSpec::default();
        for x in 0..g.x {
            for y in 0..g.y {
                let (lat, lon) = g.center_of(x, y);
                assert_eq!(g.cell_of(lat, lon), Some((x, y)));
            }
        }
    }

    #[test]
    fn coverage_examples() {
        let g = GridSpec::default();
        let mut f = MaskedField::empty(g, 2);
        f.mask[0] = true;
        let (s, _) = coverage_stats(&f);
        assert_eq!(s[0], 0.01);
        // Space-time checkerboard: parity of l + x + y.
        for l in 0..2 {
            for x in 0..g.x {
                for y in 0..g.y {
                    let i = f.index(l, x, y);
                    f.mask[i] = (l + x + y) % 2 == 0;
                }
            }
        }
        let (s, t) = coverage_stats(&f);
        assert!(s.iter().chain(&t).all(|&v| v == 0.5));
    }

    #[test]
    fn window_and_split_counts() {
        let f = MaskedField::empty(GridSpec::default(), 336);
        let (tr, va, te) = split_5_1_1(&f).unwrap();
        assert_eq!((tr.slices, va.slices, te.slices), (240, 48, 48));
        assert_eq!(sliding_windows(&tr, 12, 12).unwrap().len(), 217);
        assert_eq!(sliding_windows(&va, 12, 12).unwrap().len(), 25);
        assert_eq!(sliding_windows(&f.range(0, 24), 12, 12).unwrap().len(), 1);
        assert!(matches!(sliding_windows(&f.range(0, 23), 12, 12), Err(Error::InsufficientData(_))));
        assert_eq!(split_sizes(7), (5, 1, 1));
    }

    #[test]
    fn field_file_errors() {
        let f = MaskedField::empty(GridSpec::default(), 3);
        let mut b = encode_field(&f);
        assert_eq!(decode_field(&b).unwrap(), f);
        assert!(matches!(decode_field(&b[..b.len() - 1]), Err(Error::Corrupt(_))));
        b[..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode_field(&b), Err(Error::Format(_))));
    }

    #[test]
    fn csv_header_is_checked() {
        let ok = "device_id,timestamp,lon,lat,value\nb1,5,120.75,31.66,12.5\n";
        let r = read_records(ok.as_bytes()).unwrap();
        assert_eq!(r[0].value, 12.5);
        assert!(matches!(read_records("a,b\n1,2\n".as_bytes()), Err(Error::Format(_))));
    }
}
