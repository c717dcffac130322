//! Single-timestep training records and their on-disk layout.
//!
//! A dataset directory holds
//!
//! ```text
//! manifest.json            grid, channel schema, sigma, split, sample index
//! fields.vfld              input current fields shared by every sample
//! samples/NNNNNN_dt.dmap   density at day t
//! samples/NNNNNN_next.dmap density at day t + 1 (target)
//! ```
//!
//! Current channels are not duplicated per sample; they are rebuilt from `fields.vfld` and the
//! sample's `day_index` according to the manifest's channel schema.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::density::{build_density_map, load_density_map, store_density_map, DensityMap};
use crate::ensemble::ProbabilisticTrajectory;
use crate::error::{Error, Result};
use crate::grid::{load_field_series, store_field_series, DomainGrid, VelocityFieldSeries};
use crate::metrics::LossKind;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FIELDS_FILE: &str = "fields.vfld";
pub const SAMPLES_DIR: &str = "samples";
const DATASET_FORMAT: &str = "driftlab-dataset";
const DATASET_VERSION: u32 = 1;
const PREDICTIONS_FORMAT: &str = "driftlab-predictions";
const PREDICTIONS_VERSION: u32 = 1;

pub const DEFAULT_RATIOS: [f64; 3] = [0.70, 0.15, 0.15];

/// How ocean currents are presented to a predictor, ahead of the density channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelSchema {
    /// Two channels: `u` and `v` in cells/day.
    Velocity,
    /// One scalar channel resembling sea-surface height: a streamfunction obtained by
    /// integrating `-u` down each column.
    StreamProxy,
}

impl ChannelSchema {
    pub fn n_current_channels(self) -> usize {
        match self {
            ChannelSchema::Velocity => 2,
            ChannelSchema::StreamProxy => 1,
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name.replace('-', "_").as_str() {
            "velocity" => Ok(ChannelSchema::Velocity),
            "stream_proxy" | "ssh" => Ok(ChannelSchema::StreamProxy),
            other => Err(Error::Config(format!("unknown channel schema {other:?}"))),
        }
    }

    /// Current channels for day `day_index` of `series`, at f32 storage precision.
    pub fn channels(self, series: &VelocityFieldSeries, day_index: usize) -> Vec<Array2<f32>> {
        let to_f32 = |a: &Array2<f64>| a.mapv(|x| x as f32);
        match self {
            ChannelSchema::Velocity => {
                vec![to_f32(series.u(day_index)), to_f32(series.v(day_index))]
            }
            ChannelSchema::StreamProxy => {
                let u = series.u(day_index);
                let mut psi = Array2::<f64>::zeros(u.dim());
                for (u_col, mut psi_col) in u.axis_iter(Axis(1)).zip(psi.axis_iter_mut(Axis(1))) {
                    let mut acc = 0.0;
                    for (i, &ui) in u_col.iter().enumerate() {
                        // integrate at stored (f32) precision
                        let ui = f64::from(ui as f32);
                        psi_col[i] = -(acc + 0.5 * ui);
                        acc += ui;
                    }
                }
                psi.zip_mut_with(series.grid().land_mask(), |x, &land| {
                    if land {
                        *x = 0.0;
                    }
                });
                vec![to_f32(&psi)]
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairMeta {
    pub trajectory: u64,
    /// Series time index of day t.
    pub day_index: usize,
    pub day: f64,
    /// Days since deployment at day t; a proxy for the uncertainty level.
    pub elapsed_days: f64,
}

/// Input at day t (current channels + density) and the density at day t + 1.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotPair {
    pub meta: PairMeta,
    pub currents: Vec<Array2<f32>>,
    pub d_t: DensityMap,
    pub target: DensityMap,
}

impl SnapshotPair {
    /// Channels stacked as `[currents..., D_t]`.
    pub fn input_stack(&self) -> Array3<f32> {
        let (rows, cols) = self.d_t.dim();
        let n = self.currents.len() + 1;
        let mut out = Array3::zeros((n, rows, cols));
        for (k, c) in self.currents.iter().enumerate() {
            out.index_axis_mut(Axis(0), k).assign(c);
        }
        out.index_axis_mut(Axis(0), n - 1)
            .assign(&self.d_t.values().mapv(|x| x as f32));
        out
    }
}

/// Consecutive-day training pairs of one trajectory.
///
/// Maps are rounded to their f32 storage precision. Pairs whose later snapshot has no alive
/// particle are dropped; an empty target following a non-empty input is kept.
pub fn extract_pairs(
    traj: &ProbabilisticTrajectory,
    trajectory_id: u64,
    series: &VelocityFieldSeries,
    sigma: f64,
    schema: ChannelSchema,
) -> Result<Vec<SnapshotPair>> {
    let grid = series.grid();
    if traj.deployed_count == 0 {
        return Ok(Vec::new());
    }
    let map = |k: usize| -> Result<DensityMap> {
        let snap = &traj.snapshots[k];
        Ok(build_density_map(
            snap.positions.iter().copied(),
            traj.deployed_count,
            grid,
            sigma,
        )?
        .quantized())
    };
    let mut pairs = Vec::new();
    let mut next = None;
    for k in 0..traj.snapshots.len().saturating_sub(1) {
        if traj.snapshots[k + 1].alive() == 0 {
            break;
        }
        let d_t = match next.take() {
            Some(m) => m,
            None => map(k)?,
        };
        let target = map(k + 1)?;
        let day = traj.snapshots[k].day;
        let day_index = series.nearest_index(day);
        pairs.push(SnapshotPair {
            meta: PairMeta {
                trajectory: trajectory_id,
                day_index,
                day,
                elapsed_days: day - traj.deploy_time,
            },
            currents: schema.channels(series, day_index),
            d_t,
            target: target.clone(),
        });
        next = Some(target);
    }
    Ok(pairs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl SplitName {
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "train" => Ok(SplitName::Train),
            "val" | "validation" => Ok(SplitName::Val),
            "test" => Ok(SplitName::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<u64>,
    pub val: Vec<u64>,
    pub test: Vec<u64>,
    pub ratios: [f64; 3],
    pub seed: u64,
}

impl DatasetSplit {
    pub fn ids(&self, which: SplitName) -> &[u64] {
        match which {
            SplitName::Train => &self.train,
            SplitName::Val => &self.val,
            SplitName::Test => &self.test,
        }
    }

    pub fn which(&self, id: u64) -> Option<SplitName> {
        [SplitName::Train, SplitName::Val, SplitName::Test]
            .into_iter()
            .find(|&s| self.ids(s).contains(&id))
    }

    /// Trajectory counts `[train, val, test]`.
    pub fn sizes(&self) -> [usize; 3] {
        [self.train.len(), self.val.len(), self.test.len()]
    }

    /// Fails if any trajectory id appears twice across (or within) the splits.
    pub fn check_disjoint(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for id in self.train.iter().chain(&self.val).chain(&self.test) {
            if !seen.insert(*id) {
                return Err(Error::Data(format!(
                    "trajectory {id} appears in more than one split"
                )));
            }
        }
        Ok(())
    }
}

/// Seeded shuffle, then floor-sized validation and test sets; the remainder trains.
pub fn split_trajectories(ids: &[u64], ratios: [f64; 3], seed: u64) -> Result<DatasetSplit> {
    if ids.is_empty() {
        return Err(Error::Config("cannot split an empty id list".into()));
    }
    if ratios.iter().any(|r| r.is_nan() || *r < 0.0)
        || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(Error::Config(format!(
            "split ratios {ratios:?} must be >= 0 and sum to 1"
        )));
    }
    let mut shuffled = ids.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shuffled.shuffle(&mut rng);

    let n = ids.len() as f64;
    // epsilon before flooring
    let n_val = (ratios[1] * n + 1e-9).floor() as usize;
    let n_test = (ratios[2] * n + 1e-9).floor() as usize;
    let n_train = ids.len() - n_val - n_test;

    let split = DatasetSplit {
        train: shuffled[..n_train].to_vec(),
        val: shuffled[n_train..n_train + n_val].to_vec(),
        test: shuffled[n_train + n_val..].to_vec(),
        ratios,
        seed,
    };
    split.check_disjoint()?;
    Ok(split)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub index: usize,
    pub split: SplitName,
    #[serde(flatten)]
    pub meta: PairMeta,
    pub d_t: String,
    pub target: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub rows: usize,
    pub cols: usize,
    pub cell_size_km: [f64; 2],
    pub channel_schema: ChannelSchema,
    pub input_channels: usize,
    pub sigma: f64,
    pub velocity_units: String,
    /// Velocities are stored raw; scaling is left to the consumer.
    pub velocity_normalization: String,
    pub fields: String,
    pub split: DatasetSplit,
    pub n_samples: usize,
    pub samples: Vec<SampleEntry>,
}

fn sample_paths(index: usize) -> (String, String) {
    (
        format!("{SAMPLES_DIR}/{index:06}_dt.dmap"),
        format!("{SAMPLES_DIR}/{index:06}_next.dmap"),
    )
}

/// Incremental dataset writer: maps are written as pairs arrive, the manifest on `finish`.
pub struct DatasetWriter<'a> {
    dir: PathBuf,
    split: DatasetSplit,
    series: &'a VelocityFieldSeries,
    sigma: f64,
    schema: ChannelSchema,
    samples: Vec<SampleEntry>,
}

impl<'a> DatasetWriter<'a> {
    /// `series` supplies the current channels and must be the one pairs are extracted with.
    pub fn create(
        dir: impl AsRef<Path>,
        split: &DatasetSplit,
        series: &'a VelocityFieldSeries,
        sigma: f64,
        schema: ChannelSchema,
    ) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        split.check_disjoint()?;
        let samples_dir = dir.join(SAMPLES_DIR);
        fs::create_dir_all(&samples_dir).map_err(|e| Error::io(&samples_dir, e))?;
        Ok(DatasetWriter {
            dir,
            split: split.clone(),
            series,
            sigma,
            schema,
            samples: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn push(&mut self, pair: &SnapshotPair) -> Result<()> {
        let index = self.samples.len();
        let grid = self.series.grid();
        let which = self.split.which(pair.meta.trajectory).ok_or_else(|| {
            Error::Data(format!(
                "trajectory {} is not in the split",
                pair.meta.trajectory
            ))
        })?;
        if pair.meta.day_index >= self.series.n_times()
            || pair.currents != self.schema.channels(self.series, pair.meta.day_index)
        {
            return Err(Error::Data(format!(
                "sample {index}: current channels do not match day {} of the field series",
                pair.meta.day_index
            )));
        }
        pair.d_t.validate(grid)?;
        pair.target.validate(grid)?;
        let (d_t, target) = sample_paths(index);
        store_density_map(pair.d_t.view(), self.dir.join(&d_t))?;
        store_density_map(pair.target.view(), self.dir.join(&target))?;
        self.samples.push(SampleEntry {
            index,
            split: which,
            meta: pair.meta,
            d_t,
            target,
        });
        Ok(())
    }

    pub fn finish(self) -> Result<Manifest> {
        store_field_series(self.series, self.dir.join(FIELDS_FILE))?;
        let grid = self.series.grid();
        let manifest = Manifest {
            format: DATASET_FORMAT.into(),
            version: DATASET_VERSION,
            rows: grid.rows(),
            cols: grid.cols(),
            cell_size_km: grid.cell_size_km().map(|c| c as f32 as f64),
            channel_schema: self.schema,
            input_channels: self.schema.n_current_channels() + 1,
            sigma: self.sigma,
            velocity_units: "cells/day".into(),
            velocity_normalization: "none".into(),
            fields: FIELDS_FILE.into(),
            split: self.split,
            n_samples: self.samples.len(),
            samples: self.samples,
        };
        write_json(&self.dir.join(MANIFEST_FILE), &manifest)?;
        Ok(manifest)
    }
}

/// Writes `pairs` under `dir` in one go.
pub fn write_dataset(
    dir: impl AsRef<Path>,
    pairs: &[SnapshotPair],
    split: &DatasetSplit,
    series: &VelocityFieldSeries,
    sigma: f64,
    schema: ChannelSchema,
) -> Result<Manifest> {
    let mut w = DatasetWriter::create(dir, split, series, sigma, schema)?;
    for pair in pairs {
        w.push(pair)?;
    }
    w.finish()
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<Manifest> {
    let path = dir.as_ref().join(MANIFEST_FILE);
    let manifest: Manifest = read_json(&path)?;
    if manifest.format != DATASET_FORMAT || manifest.version != DATASET_VERSION {
        return Err(Error::format(
            &path,
            format!(
                "unsupported dataset {} v{}",
                manifest.format, manifest.version
            ),
        ));
    }
    if manifest.n_samples != manifest.samples.len() {
        return Err(Error::format(
            &path,
            format!(
                "manifest declares {} samples but lists {}",
                manifest.n_samples,
                manifest.samples.len()
            ),
        ));
    }
    Ok(manifest)
}

/// A validated dataset directory whose maps are loaded on demand.
#[derive(Debug, Clone)]
pub struct DatasetHandle {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub series: VelocityFieldSeries,
}

impl DatasetHandle {
    /// Checks the manifest against the files on disk without loading any map.
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest = read_manifest(dir)?;
        let manifest_path = dir.join(MANIFEST_FILE);
        let bad = |reason: String| Error::format(&manifest_path, reason);

        let samples_dir = dir.join(SAMPLES_DIR);
        let on_disk = match fs::read_dir(&samples_dir) {
            Ok(entries) => entries
                .filter_map(|e| e.ok())
                .filter(|e| e.path().extension().is_some_and(|x| x == "dmap"))
                .count(),
            Err(_) if manifest.n_samples == 0 => 0,
            Err(e) => return Err(Error::io(&samples_dir, e)),
        };
        if on_disk != 2 * manifest.n_samples {
            return Err(bad(format!(
                "manifest lists {} samples but {on_disk} map files are on disk",
                manifest.n_samples
            )));
        }

        let series = load_field_series(dir.join(&manifest.fields))?;
        if series.grid().dim() != (manifest.rows, manifest.cols) {
            return Err(bad(format!(
                "fields are {:?}, manifest says {}x{}",
                series.grid().dim(),
                manifest.rows,
                manifest.cols
            )));
        }
        if manifest.input_channels != manifest.channel_schema.n_current_channels() + 1 {
            return Err(bad(format!(
                "input_channels {} inconsistent with schema {:?}",
                manifest.input_channels, manifest.channel_schema
            )));
        }
        manifest.split.check_disjoint()?;
        for (pos, entry) in manifest.samples.iter().enumerate() {
            if entry.index != pos {
                return Err(bad(format!(
                    "sample at position {pos} has index {}",
                    entry.index
                )));
            }
            if manifest.split.which(entry.meta.trajectory) != Some(entry.split) {
                return Err(bad(format!(
                    "sample {pos} trajectory {} is not in split {:?}",
                    entry.meta.trajectory, entry.split
                )));
            }
            if entry.meta.day_index >= series.n_times() {
                return Err(bad(format!(
                    "sample {pos} day_index {} out of range",
                    entry.meta.day_index
                )));
            }
        }
        Ok(DatasetHandle {
            dir: dir.to_path_buf(),
            manifest,
            series,
        })
    }

    pub fn grid(&self) -> &DomainGrid {
        self.series.grid()
    }

    /// Sample indices belonging to a split, in manifest order.
    pub fn indices(&self, which: SplitName) -> Vec<usize> {
        self.manifest
            .samples
            .iter()
            .filter(|s| s.split == which)
            .map(|s| s.index)
            .collect()
    }

    /// Sample counts `[train, val, test]`.
    pub fn sample_counts(&self) -> [usize; 3] {
        [SplitName::Train, SplitName::Val, SplitName::Test].map(|s| self.indices(s).len())
    }

    pub fn load_pair(&self, index: usize) -> Result<SnapshotPair> {
        let entry = self.manifest.samples.get(index).ok_or_else(|| {
            Error::Data(format!(
                "sample {index} out of range (n = {})",
                self.manifest.n_samples
            ))
        })?;
        let grid = self.series.grid();
        let d_t = DensityMap::new(load_density_map(self.dir.join(&entry.d_t))?, grid)?;
        let target = DensityMap::new(load_density_map(self.dir.join(&entry.target))?, grid)?;
        Ok(SnapshotPair {
            meta: entry.meta,
            currents: self
                .manifest
                .channel_schema
                .channels(&self.series, entry.meta.day_index),
            d_t,
            target,
        })
    }

    pub fn load_split(&self, which: SplitName) -> Result<Vec<SnapshotPair>> {
        self.indices(which)
            .into_iter()
            .map(|i| self.load_pair(i))
            .collect()
    }

    pub fn load_all(self) -> Result<Dataset> {
        let pairs = (0..self.manifest.n_samples)
            .map(|i| self.load_pair(i))
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            manifest: self.manifest,
            series: self.series,
            pairs,
        })
    }
}

/// A dataset read back from disk, fully in memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: Manifest,
    pub series: VelocityFieldSeries,
    pub pairs: Vec<SnapshotPair>,
}

impl Dataset {
    pub fn grid(&self) -> &DomainGrid {
        self.series.grid()
    }

    /// Sample indices belonging to a split, in manifest order.
    pub fn indices(&self, which: SplitName) -> Vec<usize> {
        self.manifest
            .samples
            .iter()
            .filter(|s| s.split == which)
            .map(|s| s.index)
            .collect()
    }

    pub fn split_pairs(&self, which: SplitName) -> Vec<&SnapshotPair> {
        self.indices(which)
            .into_iter()
            .map(|i| &self.pairs[i])
            .collect()
    }

    /// Sample counts `[train, val, test]`.
    pub fn sample_counts(&self) -> [usize; 3] {
        [SplitName::Train, SplitName::Val, SplitName::Test].map(|s| self.indices(s).len())
    }
}

pub fn read_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    DatasetHandle::open(dir)?.load_all()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionEntry {
    /// Dataset sample index.
    pub index: usize,
    pub path: String,
}

/// Index of per-sample DMAP predictions. For [`LossKind::Drift`] the maps are drift maps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionIndex {
    pub format: String,
    pub version: u32,
    pub kind: LossKind,
    pub samples: Vec<PredictionEntry>,
}

/// Writes `predictions/NNNNNN.dmap` files plus `index.json` under `dir`; returns the index path.
pub fn write_predictions(
    dir: impl AsRef<Path>,
    kind: LossKind,
    predictions: &[(usize, Array2<f64>)],
) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut samples = Vec::with_capacity(predictions.len());
    for (index, values) in predictions {
        let path = format!("{index:06}.dmap");
        store_density_map(values.view(), dir.join(&path))?;
        samples.push(PredictionEntry {
            index: *index,
            path,
        });
    }
    let index = PredictionIndex {
        format: PREDICTIONS_FORMAT.into(),
        version: PREDICTIONS_VERSION,
        kind,
        samples,
    };
    let path = dir.join("index.json");
    write_json(&path, &index)?;
    Ok(path)
}

/// Loads every prediction listed in an index, keyed by dataset sample index.
pub fn read_predictions(
    index_path: impl AsRef<Path>,
) -> Result<(LossKind, HashMap<usize, Array2<f64>>)> {
    let index_path = index_path.as_ref();
    let index: PredictionIndex = read_json(index_path)?;
    if index.format != PREDICTIONS_FORMAT || index.version != PREDICTIONS_VERSION {
        return Err(Error::format(
            index_path,
            format!(
                "unsupported prediction index {} v{}",
                index.format, index.version
            ),
        ));
    }
    let base = index_path.parent().unwrap_or(Path::new("."));
    let mut out = HashMap::with_capacity(index.samples.len());
    for entry in &index.samples {
        let values = load_density_map(base.join(&entry.path))?;
        if out.insert(entry.index, values).is_some() {
            return Err(Error::format(
                index_path,
                format!("sample {} listed twice", entry.index),
            ));
        }
    }
    Ok((index.kind, out))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text =
        serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::format(path, "file is missing"),
        _ => Error::io(path, e),
    })?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}
