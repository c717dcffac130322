//! Probability density maps from particle snapshots.
//!
//! A map is a per-cell probability mass: a 2D histogram of positions normalised by the deployed
//! particle count, blurred with a truncated Gaussian and zeroed on land. Mass lost to
//! terminated particles, or smoothed onto land, is not redistributed, so totals may be below 1.

use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};

use crate::binio::{self, ByteReader, PutLe};
use crate::error::{Error, Result};
use crate::grid::{DomainGrid, Position};

const DMAP_MAGIC: &[u8; 4] = b"DMAP";
const DMAP_VERSION: u32 = 1;

/// Allowed excess of total mass over 1.
pub const MASS_TOLERANCE: f64 = 1e-9;

/// Default smoothing width, in cells.
pub const DEFAULT_SIGMA: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct DensityMap {
    values: Array2<f64>,
}

impl DensityMap {
    /// Wraps values after checking them against the map invariants on `grid`.
    pub fn new(values: Array2<f64>, grid: &DomainGrid) -> Result<Self> {
        let map = DensityMap { values };
        map.validate(grid)?;
        Ok(map)
    }

    pub fn zeros(grid: &DomainGrid) -> Self {
        DensityMap {
            values: Array2::zeros(grid.dim()),
        }
    }

    #[cfg(test)]
    pub(crate) fn from_raw(values: Array2<f64>) -> Self {
        DensityMap { values }
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.values.view()
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }

    pub fn dim(&self) -> (usize, usize) {
        self.values.dim()
    }

    pub fn total_mass(&self) -> f64 {
        self.values.sum()
    }

    /// Non-negative, finite, zero on land, total mass at most `1 + MASS_TOLERANCE`.
    pub fn validate(&self, grid: &DomainGrid) -> Result<()> {
        if self.values.dim() != grid.dim() {
            return Err(Error::Shape(format!(
                "density map is {:?}, grid is {:?}",
                self.values.dim(),
                grid.dim()
            )));
        }
        for ((i, j), &x) in self.values.indexed_iter() {
            if !x.is_finite() || x < 0.0 {
                return Err(Error::Data(format!(
                    "density {x} at row {i}, col {j} is negative or non-finite"
                )));
            }
            if x != 0.0 && grid.is_land(i, j) {
                return Err(Error::Data(format!(
                    "density {x} on land cell row {i}, col {j}"
                )));
            }
        }
        let mass = self.total_mass();
        if mass > 1.0 + MASS_TOLERANCE {
            return Err(Error::Data(format!("total mass {mass} exceeds 1")));
        }
        Ok(())
    }

    /// Rounds every value to an f32 of no greater magnitude (the DMAP storage precision).
    pub fn quantized(&self) -> Self {
        DensityMap {
            values: self.values.mapv(|x| binio::f32_toward_zero(x) as f64),
        }
    }
}

/// Normalised samples of `exp(-k^2 / 2 sigma^2)` for `|k| <= ceil(4 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (4.0 * sigma).ceil() as i64;
    let w: Vec<f64> = (-radius..=radius)
        .map(|k| (-((k * k) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|x| x / total).collect()
}

fn convolve_axis(values: &Array2<f64>, kernel: &[f64], axis: Axis) -> Array2<f64> {
    let radius = (kernel.len() / 2) as isize;
    let mut out = Array2::zeros(values.dim());
    for (src, mut dst) in values.lanes(axis).into_iter().zip(out.lanes_mut(axis)) {
        let n = src.len() as isize;
        for (idx, slot) in dst.iter_mut().enumerate() {
            let idx = idx as isize;
            let lo = (idx - radius).max(0);
            let hi = (idx + radius).min(n - 1);
            let mut acc = 0.0;
            for k in lo..=hi {
                acc += kernel[(k - idx + radius) as usize] * src[k as usize];
            }
            *slot = acc;
        }
    }
    out
}

/// Separable truncated Gaussian blur with zero padding outside the array.
pub fn gaussian_filter(values: &Array2<f64>, sigma: f64) -> Array2<f64> {
    let kernel = gaussian_kernel(sigma);
    let along_rows = convolve_axis(values, &kernel, Axis(1));
    convolve_axis(&along_rows, &kernel, Axis(0))
}

/// Per-cell fraction of `deployed_count` particles found in each cell.
pub fn histogram<P: Into<Position>>(
    positions: impl IntoIterator<Item = P>,
    deployed_count: usize,
    grid: &DomainGrid,
) -> Result<DensityMap> {
    if deployed_count == 0 {
        return Err(Error::Config("deployed_count must be >= 1".into()));
    }
    let mut counts = Array2::<u64>::zeros(grid.dim());
    for p in positions {
        let p = p.into();
        match grid.cell_of(p.x, p.y) {
            Some((i, j)) if !grid.is_land(i, j) => counts[[i, j]] += 1,
            Some(_) => return Err(Error::NotOcean { x: p.x, y: p.y }),
            None => return Err(Error::OutsideDomain { x: p.x, y: p.y }),
        }
    }
    let n = deployed_count as f64;
    Ok(DensityMap {
        values: counts.mapv(|c| c as f64 / n),
    })
}

/// Gaussian blur followed by land zeroing; mass carried onto land is dropped.
pub fn smooth(map: &DensityMap, sigma: f64, grid: &DomainGrid) -> Result<DensityMap> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Config(format!("sigma must be > 0, got {sigma}")));
    }
    if map.dim() != grid.dim() {
        return Err(Error::Shape(format!(
            "density map is {:?}, grid is {:?}",
            map.dim(),
            grid.dim()
        )));
    }
    let mut values = gaussian_filter(&map.values, sigma);
    values.zip_mut_with(grid.land_mask(), |x, &land| {
        if land {
            *x = 0.0;
        }
    });
    Ok(DensityMap { values })
}

pub fn build_density_map<P: Into<Position>>(
    positions: impl IntoIterator<Item = P>,
    deployed_count: usize,
    grid: &DomainGrid,
    sigma: f64,
) -> Result<DensityMap> {
    smooth(&histogram(positions, deployed_count, grid)?, sigma, grid)
}

/// DMAP bytes. Values are rounded toward zero to f32.
pub fn encode_density_map(values: ArrayView2<f64>) -> Result<Vec<u8>> {
    let (rows, cols) = values.dim();
    let mut buf = Vec::with_capacity(16 + 4 * rows * cols);
    buf.extend_from_slice(DMAP_MAGIC);
    buf.put_u32(DMAP_VERSION);
    buf.put_u32(binio::checked_u32(rows, "rows")?);
    buf.put_u32(binio::checked_u32(cols, "cols")?);
    for &x in values.iter() {
        buf.put_f32(binio::f32_toward_zero(x));
    }
    Ok(buf)
}

pub fn decode_density_map(bytes: &[u8], path: &Path) -> Result<Array2<f64>> {
    let mut r = ByteReader::new(bytes, path);
    r.magic(DMAP_MAGIC)?;
    r.version(DMAP_VERSION)?;
    let rows = r.u32()? as usize;
    let cols = r.u32()? as usize;
    let n = rows
        .checked_mul(cols)
        .ok_or_else(|| r.error("grid size overflow"))?;
    let raw = r.f32_vec(n)?;
    r.finish()?;
    if let Some(idx) = raw.iter().position(|x| !x.is_finite()) {
        return Err(Error::Data(format!(
            "{}: non-finite value at row {}, col {}",
            path.display(),
            idx / cols,
            idx % cols
        )));
    }
    Array2::from_shape_vec((rows, cols), raw.into_iter().map(f64::from).collect())
        .map_err(|e| Error::format(path, e.to_string()))
}

pub fn store_density_map(values: ArrayView2<f64>, path: impl AsRef<Path>) -> Result<()> {
    binio::write_file(path.as_ref(), &encode_density_map(values)?)
}

/// Reads raw DMAP values; callers check them against a grid with [`DensityMap::new`].
pub fn load_density_map(path: impl AsRef<Path>) -> Result<Array2<f64>> {
    let path = path.as_ref();
    decode_density_map(&binio::read_file(path)?, path)
}
