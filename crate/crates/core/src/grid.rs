//! Spatial domain, land mask and time series of cell-centred velocity fields.
//!
//! Velocities are held in cells/day. Fields read from VFLD files in m/s are converted once at
//! load time using the per-axis cell size.

use std::f64::consts::PI;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::binio::{self, ByteReader, PutLe};
use crate::density::gaussian_filter;
use crate::error::{Error, Result};

/// Seconds per day divided by metres per kilometre.
const MPS_TO_KM_PER_DAY: f64 = 86.4;

const VFLD_MAGIC: &[u8; 4] = b"VFLD";
const VFLD_VERSION: u32 = 1;

/// Relative tolerance on the spacing of day-stamps.
const TIME_SPACING_TOL: f64 = 1e-9;

/// Continuous position in cell-index units: `x` along columns, `y` along rows.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Position {
    pub x: f64,
    pub y: f64,
}

impl Position {
    pub const fn new(x: f64, y: f64) -> Self {
        Position { x, y }
    }

    pub fn distance(self, other: Position) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

impl From<(f64, f64)> for Position {
    fn from((x, y): (f64, f64)) -> Self {
        Position { x, y }
    }
}

impl From<[f32; 2]> for Position {
    fn from([x, y]: [f32; 2]) -> Self {
        Position {
            x: x as f64,
            y: y as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainGrid {
    rows: usize,
    cols: usize,
    cell_size_km: [f64; 2],
    land: Array2<bool>,
}

impl DomainGrid {
    /// `cell_size_km` is `[zonal, meridional]`; `land` is `rows x cols`, true on land.
    pub fn new(cell_size_km: [f64; 2], land: Array2<bool>) -> Result<Self> {
        let (rows, cols) = land.dim();
        if rows < 2 || cols < 2 {
            return Err(Error::Config(format!(
                "grid must be at least 2x2, got {rows}x{cols}"
            )));
        }
        if !(cell_size_km[0] > 0.0 && cell_size_km[1] > 0.0)
            || !cell_size_km.iter().all(|c| c.is_finite())
        {
            return Err(Error::Config(format!(
                "cell size must be positive, got {cell_size_km:?}"
            )));
        }
        if land.iter().all(|&l| l) {
            return Err(Error::Config("grid has no ocean cell".into()));
        }
        Ok(DomainGrid {
            rows,
            cols,
            cell_size_km,
            land,
        })
    }

    pub fn all_ocean(rows: usize, cols: usize, cell_size_km: [f64; 2]) -> Result<Self> {
        Self::new(cell_size_km, Array2::from_elem((rows, cols), false))
    }

    pub fn with_layout(
        rows: usize,
        cols: usize,
        cell_size_km: [f64; 2],
        layout: LandLayout,
    ) -> Result<Self> {
        Self::new(cell_size_km, layout.mask(rows, cols))
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn dim(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn cell_size_km(&self) -> [f64; 2] {
        self.cell_size_km
    }

    pub fn land_mask(&self) -> &Array2<bool> {
        &self.land
    }

    pub fn is_land(&self, row: usize, col: usize) -> bool {
        self.land[[row, col]]
    }

    /// Ocean cell on the outermost row or column, where data coverage is cut off.
    pub fn is_open_boundary(&self, row: usize, col: usize) -> bool {
        !self.land[[row, col]]
            && (row == 0 || col == 0 || row + 1 == self.rows || col + 1 == self.cols)
    }

    /// Whether `(x, y)` lies in the half-open box `[0, cols) x [0, rows)`.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= 0.0 && y >= 0.0 && x < self.cols as f64 && y < self.rows as f64
    }

    /// Cell `(row, col)` holding a continuous position, if inside the box.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        self.contains(x, y)
            .then(|| (y.floor() as usize, x.floor() as usize))
    }

    pub fn is_ocean_at(&self, x: f64, y: f64) -> bool {
        self.cell_of(x, y).is_some_and(|(i, j)| !self.land[[i, j]])
    }

    pub fn ocean_cells(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.land
            .indexed_iter()
            .filter(|(_, &l)| !l)
            .map(|(ij, _)| ij)
    }

    pub fn n_ocean(&self) -> usize {
        self.land.iter().filter(|&&l| !l).count()
    }

    /// Cell (x, y) extents of a physical distance, per axis.
    pub fn km_to_cells(&self, km: f64) -> (f64, f64) {
        (km / self.cell_size_km[0], km / self.cell_size_km[1])
    }

    fn check_shape(&self, what: &str, dim: (usize, usize)) -> Result<()> {
        if dim != (self.rows, self.cols) {
            return Err(Error::Shape(format!(
                "{what} is {}x{}, grid is {}x{}",
                dim.0, dim.1, self.rows, self.cols
            )));
        }
        Ok(())
    }
}

/// Canned land masks for synthetic experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LandLayout {
    None,
    /// Wavy coastline occupying roughly the eastern fifth of the domain.
    Coast,
    /// Round island in the middle of the domain.
    Island,
}

impl LandLayout {
    pub fn mask(self, rows: usize, cols: usize) -> Array2<bool> {
        match self {
            LandLayout::None => Array2::from_elem((rows, cols), false),
            LandLayout::Coast => Array2::from_shape_fn((rows, cols), |(i, j)| {
                let phase = 2.0 * PI * (i as f64 + 0.5) / rows as f64;
                let width = cols as f64 * (0.2 + 0.05 * phase.sin());
                (j as f64 + 0.5) >= cols as f64 - width
            }),
            LandLayout::Island => {
                let (cy, cx) = (rows as f64 / 2.0, cols as f64 / 2.0);
                let r = rows.min(cols) as f64 / 8.0;
                Array2::from_shape_fn((rows, cols), |(i, j)| {
                    let dx = j as f64 + 0.5 - cx;
                    let dy = i as f64 + 0.5 - cy;
                    dx * dx + dy * dy <= r * r
                })
            }
        }
    }
}

impl FromStr for LandLayout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(LandLayout::None),
            "coast" => Ok(LandLayout::Coast),
            "island" => Ok(LandLayout::Island),
            other => Err(Error::Config(format!("unknown land layout {other:?}"))),
        }
    }
}

/// Daily cell-centred velocity fields on a fixed grid.
///
/// `u` is the column-coordinate rate and `v` the row-coordinate rate, both in cells/day.
/// Day-stamps mark the centre of each averaging window.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityFieldSeries {
    grid: DomainGrid,
    times: Vec<f64>,
    u: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl VelocityFieldSeries {
    /// Validates shapes, time axis and finiteness; land values are forced to zero.
    pub fn new(
        grid: DomainGrid,
        times: Vec<f64>,
        mut u: Vec<Array2<f64>>,
        mut v: Vec<Array2<f64>>,
    ) -> Result<Self> {
        if times.len() < 2 {
            return Err(Error::Config(format!(
                "a field series needs at least 2 day-stamps, got {}",
                times.len()
            )));
        }
        if u.len() != times.len() || v.len() != times.len() {
            return Err(Error::Shape(format!(
                "{} day-stamps but {} u fields and {} v fields",
                times.len(),
                u.len(),
                v.len()
            )));
        }
        check_time_axis(&times)?;
        for (k, (uk, vk)) in u.iter_mut().zip(v.iter_mut()).enumerate() {
            grid.check_shape("u field", uk.dim())?;
            grid.check_shape("v field", vk.dim())?;
            for (name, field) in [("u", &mut *uk), ("v", &mut *vk)] {
                Zip::indexed(field)
                    .and(&grid.land)
                    .fold_while(Ok(()), |_, (i, j), val, &land| {
                        if land {
                            *val = 0.0;
                        } else if !val.is_finite() {
                            return ndarray::FoldWhile::Done(Err(Error::Data(format!(
                                "non-finite {name} at time {k}, row {i}, col {j}"
                            ))));
                        }
                        ndarray::FoldWhile::Continue(Ok(()))
                    })
                    .into_inner()?;
            }
        }
        Ok(VelocityFieldSeries { grid, times, u, v })
    }

    pub fn grid(&self) -> &DomainGrid {
        &self.grid
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn n_times(&self) -> usize {
        self.times.len()
    }

    pub fn u(&self, k: usize) -> &Array2<f64> {
        &self.u[k]
    }

    pub fn v(&self, k: usize) -> &Array2<f64> {
        &self.v[k]
    }

    pub fn first_time(&self) -> f64 {
        self.times[0]
    }

    pub fn last_time(&self) -> f64 {
        self.times[self.times.len() - 1]
    }

    pub fn time_step(&self) -> f64 {
        self.times[1] - self.times[0]
    }

    /// Index of the day-stamp closest to `t`.
    pub fn nearest_index(&self, t: f64) -> usize {
        let k = self.times.partition_point(|&s| s < t);
        match k {
            0 => 0,
            k if k == self.times.len() => k - 1,
            k if (self.times[k] - t) < (t - self.times[k - 1]) => k,
            k => k - 1,
        }
    }

    /// Same series with every velocity sign flipped.
    pub fn negated(&self) -> Self {
        let flip = |fields: &[Array2<f64>]| fields.iter().map(|f| f.mapv(|x| -x)).collect();
        VelocityFieldSeries {
            grid: self.grid.clone(),
            times: self.times.clone(),
            u: flip(&self.u),
            v: flip(&self.v),
        }
    }

    /// Replaces the fields while keeping grid and time axis; re-validates.
    pub fn map_fields(&self, mut f: impl FnMut(&Array2<f64>) -> Array2<f64>) -> Result<Self> {
        let u = self.u.iter().map(&mut f).collect();
        let v = self.v.iter().map(&mut f).collect();
        Self::new(self.grid.clone(), self.times.clone(), u, v)
    }
}

fn check_time_axis(times: &[f64]) -> Result<()> {
    if !times.iter().all(|t| t.is_finite()) {
        return Err(Error::Data("non-finite day-stamp".into()));
    }
    let step = times[1] - times[0];
    if step <= 0.0 {
        return Err(Error::Data("day-stamps must be strictly increasing".into()));
    }
    for (k, w) in times.windows(2).enumerate() {
        let d = w[1] - w[0];
        if d <= 0.0 {
            return Err(Error::Data(format!(
                "day-stamps not strictly increasing at index {}",
                k + 1
            )));
        }
        if (d - step).abs() > TIME_SPACING_TOL * step.abs().max(1.0) {
            return Err(Error::Data(format!(
                "non-uniform day-stamp spacing at index {}: {d} vs {step}",
                k + 1
            )));
        }
    }
    Ok(())
}

/// Moves C-grid velocity samples to cell centres.
///
/// `u_stag[i][j]` sits half a cell right of centre `(i, j)` and `v_stag[i][j]` half a cell
/// below it, so the centred value is the mean of the two bracketing faces. The first column
/// (for `u`) and first row (for `v`) have a single face and copy it. NaN samples are treated
/// as missing; with no finite sample the value is 0, as it is on land.
pub fn align_staggered_to_centers(
    u_stag: ArrayView2<f64>,
    v_stag: ArrayView2<f64>,
    grid: &DomainGrid,
) -> Result<(Array2<f64>, Array2<f64>)> {
    grid.check_shape("staggered u", u_stag.dim())?;
    grid.check_shape("staggered v", v_stag.dim())?;

    let u = Array2::from_shape_fn(grid.dim(), |(i, j)| {
        if grid.is_land(i, j) {
            return 0.0;
        }
        let right = u_stag[[i, j]];
        let left = if j > 0 { u_stag[[i, j - 1]] } else { f64::NAN };
        mean_of_present(left, right)
    });
    let v = Array2::from_shape_fn(grid.dim(), |(i, j)| {
        if grid.is_land(i, j) {
            return 0.0;
        }
        let below = v_stag[[i, j]];
        let above = if i > 0 { v_stag[[i - 1, j]] } else { f64::NAN };
        mean_of_present(above, below)
    });
    Ok((u, v))
}

fn mean_of_present(a: f64, b: f64) -> f64 {
    match (a.is_nan(), b.is_nan()) {
        (false, false) => 0.5 * (a + b),
        (false, true) => a,
        (true, false) => b,
        (true, true) => 0.0,
    }
}

/// Velocity units recorded in a VFLD header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VelocityUnits {
    CellsPerDay = 0,
    MetersPerSecond = 1,
}

impl VelocityUnits {
    fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(VelocityUnits::CellsPerDay),
            1 => Some(VelocityUnits::MetersPerSecond),
            _ => None,
        }
    }
}

/// Cells/day equivalent of 1 m/s along an axis whose cells are `cell_km` wide.
pub fn mps_to_cells_per_day(cell_km: f64) -> f64 {
    MPS_TO_KM_PER_DAY / cell_km
}

/// Encodes a series as a VFLD byte buffer (cells/day, f32 samples).
pub fn encode_field_series(series: &VelocityFieldSeries) -> Result<Vec<u8>> {
    let grid = series.grid();
    let n = grid.rows * grid.cols;
    let mut buf = Vec::with_capacity(40 + 8 * series.n_times() + n + 8 * n * series.n_times());
    buf.extend_from_slice(VFLD_MAGIC);
    buf.put_u32(VFLD_VERSION);
    buf.put_u32(binio::checked_u32(grid.rows, "rows")?);
    buf.put_u32(binio::checked_u32(grid.cols, "cols")?);
    buf.put_u32(binio::checked_u32(series.n_times(), "n_times")?);
    buf.put_u32(VelocityUnits::CellsPerDay as u32);
    buf.put_f32(grid.cell_size_km[0] as f32);
    buf.put_f32(grid.cell_size_km[1] as f32);
    for &t in &series.times {
        buf.put_f64(t);
    }
    buf.extend(grid.land.iter().map(|&l| l as u8));
    for (u, v) in series.u.iter().zip(&series.v) {
        for &x in u.iter() {
            buf.put_f32(x as f32);
        }
        for &x in v.iter() {
            buf.put_f32(x as f32);
        }
    }
    Ok(buf)
}

pub fn decode_field_series(bytes: &[u8], path: &Path) -> Result<VelocityFieldSeries> {
    let mut r = ByteReader::new(bytes, path);
    r.magic(VFLD_MAGIC)?;
    r.version(VFLD_VERSION)?;
    let rows = r.u32()? as usize;
    let cols = r.u32()? as usize;
    let n_times = r.u32()? as usize;
    let units_code = r.u32()?;
    let units = VelocityUnits::from_code(units_code)
        .ok_or_else(|| r.error(format!("unknown units code {units_code}")))?;
    let cell_size_km = [r.f32()? as f64, r.f32()? as f64];
    let times = r.f64_vec(n_times)?;
    let n = rows
        .checked_mul(cols)
        .ok_or_else(|| r.error("grid size overflow"))?;
    let land_bytes = r.bytes(n)?;
    let land: Vec<bool> = land_bytes
        .iter()
        .map(|&b| match b {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(r.error(format!("land mask byte {other} is not 0 or 1"))),
        })
        .collect::<Result<_>>()?;
    let land = Array2::from_shape_vec((rows, cols), land).map_err(|e| r.error(e.to_string()))?;

    let (su, sv) = match units {
        VelocityUnits::CellsPerDay => (1.0, 1.0),
        VelocityUnits::MetersPerSecond => (
            mps_to_cells_per_day(cell_size_km[0]),
            mps_to_cells_per_day(cell_size_km[1]),
        ),
    };

    let mut u = Vec::with_capacity(n_times);
    let mut v = Vec::with_capacity(n_times);
    for k in 0..n_times {
        for (scale, name, out) in [(su, "u", &mut u), (sv, "v", &mut v)] {
            let raw = r.f32_vec(n)?;
            let mut field = Array2::zeros((rows, cols));
            for (idx, (&x, &is_land)) in raw.iter().zip(&land).enumerate() {
                if is_land {
                    continue;
                }
                if !x.is_finite() {
                    return Err(Error::Data(format!(
                        "{}: non-finite {name} in ocean cell at time {k}, row {}, col {}",
                        path.display(),
                        idx / cols,
                        idx % cols
                    )));
                }
                field[[idx / cols, idx % cols]] = x as f64 * scale;
            }
            out.push(field);
        }
    }
    r.finish()?;

    let grid =
        DomainGrid::new(cell_size_km, land).map_err(|e| Error::format(path, e.to_string()))?;
    VelocityFieldSeries::new(grid, times, u, v)
}

/// Writes a series as VFLD (cells/day). Samples are stored as f32.
pub fn store_field_series(series: &VelocityFieldSeries, path: impl AsRef<Path>) -> Result<()> {
    binio::write_file(path.as_ref(), &encode_field_series(series)?)
}

pub fn load_field_series(path: impl AsRef<Path>) -> Result<VelocityFieldSeries> {
    let path = path.as_ref();
    decode_field_series(&binio::read_file(path)?, path)
}

/// Analytic flow families used in place of ocean-model output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FlowKind {
    /// Constant flow of speed `amplitude` heading `direction_deg` (0 = +x, 90 = +y).
    Uniform { direction_deg: f64 },
    /// Rigid rotation with angular rate `amplitude` (1/day) about `center`
    /// (defaults to the domain centre).
    SolidBodyRotation { center: Option<(f64, f64)> },
    /// Time-periodic double gyre stretched over the domain; `amplitude` is the peak zonal speed.
    DoubleGyre { epsilon: f64, period_days: f64 },
    /// Superposed Gaussian eddies with random centres, signs and slow drifts.
    RandomEddies {
        count: usize,
        scale_cells: f64,
        drift_cells_per_day: f64,
    },
}

impl FlowKind {
    pub fn name(&self) -> &'static str {
        match self {
            FlowKind::Uniform { .. } => "uniform",
            FlowKind::SolidBodyRotation { .. } => "solid_body_rotation",
            FlowKind::DoubleGyre { .. } => "double_gyre",
            FlowKind::RandomEddies { .. } => "random_eddies",
        }
    }

    /// Kind with default parameters, by name. Accepts `-` or `_` separators.
    pub fn from_name(name: &str) -> Result<Self> {
        match name.replace('-', "_").as_str() {
            "uniform" => Ok(FlowKind::Uniform { direction_deg: 0.0 }),
            "solid_body_rotation" | "rotation" => Ok(FlowKind::SolidBodyRotation { center: None }),
            "double_gyre" => Ok(FlowKind::DoubleGyre {
                epsilon: 0.25,
                period_days: 10.0,
            }),
            "random_eddies" => Ok(FlowKind::RandomEddies {
                count: 8,
                scale_cells: 6.0,
                drift_cells_per_day: 0.1,
            }),
            other => Err(Error::Config(format!("unsupported flow kind {other:?}"))),
        }
    }
}

impl fmt::Display for FlowKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticFlowSpec {
    pub kind: FlowKind,
    /// Cells/day (for solid-body rotation: the angular rate in 1/day).
    pub amplitude: f64,
    pub seed: u64,
}

impl SyntheticFlowSpec {
    fn validate(&self) -> Result<()> {
        if !(self.amplitude >= 0.0 && self.amplitude.is_finite()) {
            return Err(Error::Config(format!(
                "amplitude must be finite and >= 0, got {}",
                self.amplitude
            )));
        }
        match self.kind {
            FlowKind::DoubleGyre { period_days, .. }
                if period_days.is_nan() || period_days <= 0.0 =>
            {
                Err(Error::Config(format!(
                    "double gyre period must be > 0, got {period_days}"
                )))
            }
            FlowKind::RandomEddies { count: 0, .. } => {
                Err(Error::Config("random eddies need count >= 1".into()))
            }
            FlowKind::RandomEddies { scale_cells, .. }
                if scale_cells.is_nan() || scale_cells <= 0.0 =>
            {
                Err(Error::Config(format!(
                    "eddy scale must be > 0, got {scale_cells}"
                )))
            }
            _ => Ok(()),
        }
    }
}

struct Eddy {
    x: f64,
    y: f64,
    dx: f64,
    dy: f64,
    sign: f64,
}

/// Builds `n_days` daily fields at day-stamps `0, 1, ..., n_days - 1`, sampled at cell centres.
pub fn generate_synthetic_series(
    spec: &SyntheticFlowSpec,
    grid: &DomainGrid,
    n_days: usize,
) -> Result<VelocityFieldSeries> {
    if n_days < 2 {
        return Err(Error::Config(format!("n_days must be >= 2, got {n_days}")));
    }
    spec.validate()?;
    let (rows, cols) = grid.dim();
    let (m, n) = (cols as f64, rows as f64);
    let amp = spec.amplitude;

    let eddies: Vec<Eddy> = match spec.kind {
        FlowKind::RandomEddies {
            count,
            drift_cells_per_day,
            ..
        } => {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            (0..count)
                .map(|_| Eddy {
                    x: rng.random::<f64>() * m,
                    y: rng.random::<f64>() * n,
                    dx: (2.0 * rng.random::<f64>() - 1.0) * drift_cells_per_day,
                    dy: (2.0 * rng.random::<f64>() - 1.0) * drift_cells_per_day,
                    sign: if rng.random::<bool>() { 1.0 } else { -1.0 },
                })
                .collect()
        }
        _ => Vec::new(),
    };

    let velocity = |x: f64, y: f64, t: f64| -> (f64, f64) {
        match spec.kind {
            FlowKind::Uniform { direction_deg } => {
                let a = direction_deg.to_radians();
                // exact axes
                match direction_deg {
                    0.0 => (amp, 0.0),
                    90.0 => (0.0, amp),
                    180.0 => (-amp, 0.0),
                    270.0 => (0.0, -amp),
                    _ => (amp * a.cos(), amp * a.sin()),
                }
            }
            FlowKind::SolidBodyRotation { center } => {
                let (x0, y0) = center.unwrap_or((m / 2.0, n / 2.0));
                (-amp * (y - y0), amp * (x - x0))
            }
            FlowKind::DoubleGyre {
                epsilon,
                period_days,
            } => {
                let gx = 2.0 * x / m;
                let gy = y / n;
                let s = epsilon * (2.0 * PI * t / period_days).sin();
                let f = s * gx * gx + (1.0 - 2.0 * s) * gx;
                let df = 2.0 * s * gx + 1.0 - 2.0 * s;
                let u = -amp * (PI * f).sin() * (PI * gy).cos();
                let v = amp * (2.0 * n / m) * (PI * f).cos() * (PI * gy).sin() * df;
                (u, v)
            }
            FlowKind::RandomEddies { scale_cells, .. } => {
                let l = scale_cells;
                let peak = amp * 0.5f64.exp();
                eddies.iter().fold((0.0, 0.0), |(u, v), e| {
                    let rx = x - (e.x + e.dx * t);
                    let ry = y - (e.y + e.dy * t);
                    let g = (-(rx * rx + ry * ry) / (2.0 * l * l)).exp();
                    (
                        u + e.sign * peak * (ry / l) * g,
                        v - e.sign * peak * (rx / l) * g,
                    )
                })
            }
        }
    };

    let times: Vec<f64> = (0..n_days).map(|d| d as f64).collect();
    let mut us = Vec::with_capacity(n_days);
    let mut vs = Vec::with_capacity(n_days);
    for &t in &times {
        let mut u = Array2::zeros((rows, cols));
        let mut v = Array2::zeros((rows, cols));
        for i in 0..rows {
            for j in 0..cols {
                if grid.is_land(i, j) {
                    continue;
                }
                let (a, b) = velocity(j as f64 + 0.5, i as f64 + 0.5, t);
                u[[i, j]] = a;
                v[[i, j]] = b;
            }
        }
        us.push(u);
        vs.push(v);
    }
    VelocityFieldSeries::new(grid.clone(), times, us, vs)
}

/// Gaussian-smooths every velocity channel (same kernel as density smoothing) and re-zeroes land.
pub fn downgrade_resolution(
    series: &VelocityFieldSeries,
    sigma: f64,
) -> Result<VelocityFieldSeries> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Config(format!("sigma must be > 0, got {sigma}")));
    }
    // VelocityFieldSeries::new zeroes land after smoothing.
    series.map_fields(|f| gaussian_filter(f, sigma))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::array;

    fn ocean(rows: usize, cols: usize) -> DomainGrid {
        DomainGrid::all_ocean(rows, cols, [1.3, 1.3]).unwrap()
    }

    #[test]
    fn grid_invariants() {
        assert!(DomainGrid::all_ocean(1, 5, [1.0, 1.0]).is_err());
        assert!(DomainGrid::all_ocean(3, 3, [0.0, 1.0]).is_err());
        assert!(DomainGrid::new([1.0, 1.0], Array2::from_elem((3, 3), true)).is_err());
        let g = ocean(4, 5);
        assert!(g.is_open_boundary(0, 2));
        assert!(g.is_open_boundary(3, 4));
        assert!(!g.is_open_boundary(1, 1));
        assert_eq!(g.cell_of(4.99, 3.5), Some((3, 4)));
        assert_eq!(g.cell_of(5.0, 1.0), None);
    }

    #[test]
    fn align_constant_is_unchanged() {
        let g = ocean(4, 5);
        let u = Array2::from_elem((4, 5), 3.0);
        let v = Array2::from_elem((4, 5), -2.0);
        let (uc, vc) = align_staggered_to_centers(u.view(), v.view(), &g).unwrap();
        assert!(uc.iter().all(|&x| x == 3.0));
        assert!(vc.iter().all(|&x| x == -2.0));
    }

    #[test]
    fn align_hand_row() {
        let g = ocean(2, 3);
        let u = array![[0.0, 2.0, 4.0], [0.0, 2.0, 4.0]];
        let v = Array2::zeros((2, 3));
        let (uc, _) = align_staggered_to_centers(u.view(), v.view(), &g).unwrap();
        // col 0 copies its only face, cols 1..2 average left and right faces
        assert_eq!(uc.row(0).to_vec(), vec![0.0, 1.0, 3.0]);
    }

    #[test]
    fn align_vertical_and_affine_exact() {
        let g = ocean(5, 4);
        // faces at y = i + 1 carry value 2*(i+1) + 1, centres at y = i + 0.5
        let v = Array2::from_shape_fn((5, 4), |(i, _)| 2.0 * (i as f64 + 1.0) + 1.0);
        let u = Array2::zeros((5, 4));
        let (_, vc) = align_staggered_to_centers(u.view(), v.view(), &g).unwrap();
        for i in 1..5 {
            assert_eq!(vc[[i, 2]], 2.0 * (i as f64 + 0.5) + 1.0);
        }
        assert_eq!(vc[[0, 2]], 3.0);
    }

    #[test]
    fn align_land_and_nan() {
        let mut land = Array2::from_elem((3, 3), false);
        land[[1, 1]] = true;
        let g = DomainGrid::new([1.0, 1.0], land).unwrap();
        let mut u = Array2::from_elem((3, 3), 5.0);
        u[[1, 1]] = f64::NAN;
        u[[2, 0]] = f64::NAN;
        u[[2, 1]] = f64::NAN;
        let v = Array2::from_elem((3, 3), 7.0);
        let (uc, vc) = align_staggered_to_centers(u.view(), v.view(), &g).unwrap();
        assert_eq!(uc[[1, 1]], 0.0);
        assert_eq!(vc[[1, 1]], 0.0);
        // left face NaN -> right face only
        assert_eq!(uc[[1, 2]], 5.0);
        // both faces NaN -> 0
        assert_eq!(uc[[2, 1]], 0.0);
        assert_eq!(uc[[2, 0]], 0.0);
    }

    #[test]
    fn align_rejects_shape_mismatch() {
        let g = ocean(3, 3);
        let u = Array2::zeros((3, 4));
        let v = Array2::zeros((3, 3));
        assert!(matches!(
            align_staggered_to_centers(u.view(), v.view(), &g),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn unit_conversion() {
        assert_relative_eq!(
            mps_to_cells_per_day(1.3),
            66.461_538_461_538_46,
            epsilon = 1e-12
        );
    }

    #[test]
    fn series_rejects_bad_time_axis() {
        let g = ocean(2, 2);
        let z = || vec![Array2::zeros((2, 2)); 3];
        assert!(VelocityFieldSeries::new(g.clone(), vec![0.0, 1.0, 3.0], z(), z()).is_err());
        assert!(VelocityFieldSeries::new(g.clone(), vec![0.0, 0.0, 0.0], z(), z()).is_err());
        assert!(
            VelocityFieldSeries::new(g, vec![0.0], z()[..1].to_vec(), z()[..1].to_vec()).is_err()
        );
    }

    #[test]
    fn series_rejects_nan_in_ocean_and_zeroes_land() {
        let mut land = Array2::from_elem((2, 2), false);
        land[[0, 0]] = true;
        let g = DomainGrid::new([1.0, 1.0], land).unwrap();
        let mut u = Array2::from_elem((2, 2), 1.0);
        u[[0, 0]] = f64::NAN;
        let s = VelocityFieldSeries::new(
            g.clone(),
            vec![0.0, 1.0],
            vec![u.clone(), u.clone()],
            vec![u.clone(), u.clone()],
        )
        .unwrap();
        assert_eq!(s.u(0)[[0, 0]], 0.0);
        u[[1, 1]] = f64::INFINITY;
        let err = VelocityFieldSeries::new(
            g,
            vec![0.0, 1.0],
            vec![u.clone(), u.clone()],
            vec![u.clone(), u],
        )
        .unwrap_err();
        assert!(err.to_string().contains("row 1, col 1"), "{err}");
    }

    #[test]
    fn uniform_synthetic() {
        let g = DomainGrid::with_layout(8, 10, [1.3, 1.3], LandLayout::Coast).unwrap();
        let spec = SyntheticFlowSpec {
            kind: FlowKind::from_name("uniform").unwrap(),
            amplitude: 1.0,
            seed: 0,
        };
        let s = generate_synthetic_series(&spec, &g, 3).unwrap();
        assert_eq!(s.times(), &[0.0, 1.0, 2.0]);
        for k in 0..3 {
            for ((i, j), &u) in s.u(k).indexed_iter() {
                let expect = if g.is_land(i, j) { 0.0 } else { 1.0 };
                assert_eq!(u, expect);
                assert_eq!(s.v(k)[[i, j]], 0.0);
            }
        }
    }

    #[test]
    fn rotation_vanishes_at_center() {
        let g = ocean(9, 9);
        let spec = SyntheticFlowSpec {
            kind: FlowKind::SolidBodyRotation {
                center: Some((4.5, 4.5)),
            },
            amplitude: 0.3,
            seed: 0,
        };
        let s = generate_synthetic_series(&spec, &g, 2).unwrap();
        assert_eq!(s.u(0)[[4, 4]], 0.0);
        assert_eq!(s.v(0)[[4, 4]], 0.0);
        // u = -w (y - y0), v = w (x - x0) at centre of cell (6, 2): x = 2.5, y = 6.5
        assert_relative_eq!(s.u(1)[[6, 2]], -0.3 * 2.0);
        assert_relative_eq!(s.v(1)[[6, 2]], 0.3 * -2.0);
    }

    #[test]
    fn synthetic_is_deterministic_and_validated() {
        let g = DomainGrid::with_layout(16, 16, [1.3, 1.3], LandLayout::Island).unwrap();
        let spec = SyntheticFlowSpec {
            kind: FlowKind::from_name("random-eddies").unwrap(),
            amplitude: 2.0,
            seed: 42,
        };
        let a = generate_synthetic_series(&spec, &g, 4).unwrap();
        let b = generate_synthetic_series(&spec, &g, 4).unwrap();
        assert_eq!(
            encode_field_series(&a).unwrap(),
            encode_field_series(&b).unwrap()
        );
        let other = SyntheticFlowSpec {
            seed: 43,
            ..spec.clone()
        };
        assert_ne!(a, generate_synthetic_series(&other, &g, 4).unwrap());

        assert!(generate_synthetic_series(&spec, &g, 1).is_err());
        assert!(FlowKind::from_name("vortex-street").is_err());
        let no_eddies = SyntheticFlowSpec {
            kind: FlowKind::RandomEddies {
                count: 0,
                scale_cells: 3.0,
                drift_cells_per_day: 0.0,
            },
            ..spec
        };
        assert!(generate_synthetic_series(&no_eddies, &g, 3).is_err());
    }

    #[test]
    fn double_gyre_is_divergence_free_in_index_space() {
        let g = ocean(32, 64);
        let spec = SyntheticFlowSpec {
            kind: FlowKind::from_name("double_gyre").unwrap(),
            amplitude: 1.5,
            seed: 0,
        };
        let s = generate_synthetic_series(&spec, &g, 3).unwrap();
        let (u, v) = (s.u(2), s.v(2));
        let max_speed = u.iter().fold(0.0f64, |a, &x| a.max(x.abs()));
        assert!(max_speed <= 1.5 && max_speed > 1.0);
        let mut worst = 0.0f64;
        for i in 1..31 {
            for j in 1..63 {
                let div =
                    (u[[i, j + 1]] - u[[i, j - 1]]) / 2.0 + (v[[i + 1, j]] - v[[i - 1, j]]) / 2.0;
                worst = worst.max(div.abs());
            }
        }
        // central differences: O(h^2) truncation only
        assert!(worst < 5e-3, "max divergence {worst}");
    }

    #[test]
    fn downgrade_constant_and_delta() {
        let g = ocean(21, 21);
        let c = Array2::from_elem((21, 21), 2.5);
        let s = VelocityFieldSeries::new(
            g.clone(),
            vec![0.0, 1.0],
            vec![c.clone(), c.clone()],
            vec![c.clone(), c],
        )
        .unwrap();
        let d = downgrade_resolution(&s, 1.0).unwrap();
        for i in 5..16 {
            for j in 5..16 {
                assert!((d.u(0)[[i, j]] - 2.5).abs() < 1e-12);
            }
        }

        let mut delta = Array2::zeros((21, 21));
        delta[[10, 10]] = 3.0;
        let s = VelocityFieldSeries::new(
            g,
            vec![0.0, 1.0],
            vec![delta.clone(), delta.clone()],
            vec![delta.clone(), delta],
        )
        .unwrap();
        let d = downgrade_resolution(&s, 1.0).unwrap();
        // closed-form normalised kernel
        let w: Vec<f64> = (-4..=4)
            .map(|k: i32| (-(k * k) as f64 / 2.0).exp())
            .collect();
        let z: f64 = w.iter().sum();
        for di in -4i32..=4 {
            for dj in -4i32..=4 {
                let expect = 3.0 * w[(di + 4) as usize] * w[(dj + 4) as usize] / (z * z);
                let got = d.v(1)[[(10 + di) as usize, (10 + dj) as usize]];
                assert_relative_eq!(got, expect, max_relative = 1e-12);
            }
        }
        assert_eq!(d.u(0)[[10, 15]], 0.0);
        assert!(downgrade_resolution(&d, 0.0).is_err());
    }

    #[test]
    fn downgrade_zeroes_land_and_small_sigma_is_near_identity() {
        let g = DomainGrid::with_layout(24, 24, [1.3, 1.3], LandLayout::Island).unwrap();
        let spec = SyntheticFlowSpec {
            kind: FlowKind::from_name("double_gyre").unwrap(),
            amplitude: 1.0,
            seed: 0,
        };
        let s = generate_synthetic_series(&spec, &g, 2).unwrap();
        let d = downgrade_resolution(&s, 1.0).unwrap();
        for (i, j) in (0..24).flat_map(|i| (0..24).map(move |j| (i, j))) {
            if g.is_land(i, j) {
                assert_eq!(d.u(0)[[i, j]], 0.0);
                assert_eq!(d.v(1)[[i, j]], 0.0);
            }
        }
        let near = downgrade_resolution(&s, 0.05).unwrap();
        for (i, j) in g.ocean_cells() {
            if i > 0 && j > 0 && i < 23 && j < 23 {
                assert!((near.u(0)[[i, j]] - s.u(0)[[i, j]]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn nearest_index() {
        let g = ocean(2, 2);
        let z = vec![Array2::zeros((2, 2)); 4];
        let s = VelocityFieldSeries::new(g, vec![1.0, 2.0, 3.0, 4.0], z.clone(), z).unwrap();
        assert_eq!(s.nearest_index(-3.0), 0);
        assert_eq!(s.nearest_index(2.2), 1);
        assert_eq!(s.nearest_index(2.7), 2);
        assert_eq!(s.nearest_index(9.0), 3);
    }
}
