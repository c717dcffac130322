//! Loss functions over density maps, inference post-processing and split-level evaluation.
//!
//! All losses are mean squared errors over a set of ocean pixels, accumulated in f64.

use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView2, Zip};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binio::PutLe;
use crate::dataset::SnapshotPair;
use crate::error::{Error, Result};
use crate::grid::DomainGrid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Position,
    Drift,
    Threshold,
}

impl LossKind {
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "position" => Ok(LossKind::Position),
            "drift" => Ok(LossKind::Drift),
            "threshold" => Ok(LossKind::Threshold),
            other => Err(Error::Config(format!("unknown loss kind {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Position => "position",
            LossKind::Drift => "drift",
            LossKind::Threshold => "threshold",
        }
    }
}

/// Pixels that count towards a loss. `true` marks ocean.
#[derive(Debug, Clone, PartialEq)]
pub struct OceanMask(pub Array2<bool>);

impl OceanMask {
    pub fn all(rows: usize, cols: usize) -> Self {
        OceanMask(Array2::from_elem((rows, cols), true))
    }

    pub fn dim(&self) -> (usize, usize) {
        self.0.dim()
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&o| o).count()
    }
}

impl From<&DomainGrid> for OceanMask {
    fn from(grid: &DomainGrid) -> Self {
        OceanMask(grid.land_mask().mapv(|land| !land))
    }
}

fn check_dims(what: &str, a: (usize, usize), mask: &OceanMask) -> Result<()> {
    if a != mask.dim() {
        return Err(Error::Shape(format!(
            "{what} is {a:?}, mask is {:?}",
            mask.dim()
        )));
    }
    Ok(())
}

/// Mean of `(d_next - d_hat)^2` over ocean pixels.
pub fn l_position(
    d_hat: ArrayView2<f64>,
    d_next: ArrayView2<f64>,
    mask: &OceanMask,
) -> Result<f64> {
    check_dims("prediction", d_hat.dim(), mask)?;
    check_dims("target", d_next.dim(), mask)?;
    let mut sum = 0.0;
    let mut n = 0usize;
    Zip::from(&d_hat)
        .and(&d_next)
        .and(&mask.0)
        .for_each(|&p, &t, &ocean| {
            if ocean {
                sum += (t - p) * (t - p);
                n += 1;
            }
        });
    if n == 0 {
        return Err(Error::Data("loss over an empty ocean mask".into()));
    }
    Ok(sum / n as f64)
}

/// Mean of `(R - r_hat)^2` over ocean pixels, with `R = d_next - d_t`.
pub fn l_drift(
    r_hat: ArrayView2<f64>,
    d_t: ArrayView2<f64>,
    d_next: ArrayView2<f64>,
    mask: &OceanMask,
) -> Result<f64> {
    check_dims("drift prediction", r_hat.dim(), mask)?;
    check_dims("input", d_t.dim(), mask)?;
    check_dims("target", d_next.dim(), mask)?;
    let mut sum = 0.0;
    let mut n = 0usize;
    Zip::from(&r_hat)
        .and(&d_t)
        .and(&d_next)
        .and(&mask.0)
        .for_each(|&r, &a, &b, &ocean| {
            if ocean {
                let e = (b - a) - r;
                sum += e * e;
                n += 1;
            }
        });
    if n == 0 {
        return Err(Error::Data("loss over an empty ocean mask".into()));
    }
    Ok(sum / n as f64)
}

/// Mean squared error over ocean pixels where either map is strictly positive.
/// Returns 0 when there is no such pixel.
pub fn l_threshold(
    d_hat: ArrayView2<f64>,
    d_next: ArrayView2<f64>,
    mask: &OceanMask,
) -> Result<f64> {
    check_dims("prediction", d_hat.dim(), mask)?;
    check_dims("target", d_next.dim(), mask)?;
    let mut sum = 0.0;
    let mut n = 0usize;
    Zip::from(&d_hat)
        .and(&d_next)
        .and(&mask.0)
        .for_each(|&p, &t, &ocean| {
            if ocean && (t > 0.0 || p > 0.0) {
                sum += (t - p) * (t - p);
                n += 1;
            }
        });
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

pub fn clip_negative(values: &Array2<f64>) -> Array2<f64> {
    values.mapv(|x| x.max(0.0))
}

/// `d_t + r_hat`, clipped at zero, land zeroed.
pub fn recover_from_drift(
    r_hat: ArrayView2<f64>,
    d_t: ArrayView2<f64>,
    mask: &OceanMask,
) -> Result<Array2<f64>> {
    check_dims("drift prediction", r_hat.dim(), mask)?;
    check_dims("input", d_t.dim(), mask)?;
    let mut out = &d_t + &r_hat;
    postprocess_in_place(&mut out, mask);
    Ok(out)
}

fn postprocess_in_place(values: &mut Array2<f64>, mask: &OceanMask) {
    Zip::from(values).and(&mask.0).for_each(|x, &ocean| {
        *x = if ocean { x.max(0.0) } else { 0.0 };
    });
}

/// Pairwise summation.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 8 {
        return xs.iter().sum();
    }
    let (a, b) = xs.split_at(xs.len() / 2);
    pairwise_sum(a) + pairwise_sum(b)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub kind: LossKind,
    pub n: usize,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    #[serde(skip)]
    pub per_sample: Vec<f64>,
}

impl LossReport {
    pub fn from_samples(kind: LossKind, per_sample: Vec<f64>) -> Result<Self> {
        if per_sample.is_empty() {
            return Err(Error::Data("no samples to evaluate".into()));
        }
        let n = per_sample.len();
        let mean = pairwise_sum(&per_sample) / n as f64;
        let sq: Vec<f64> = per_sample.iter().map(|x| (x - mean) * (x - mean)).collect();
        let std = (pairwise_sum(&sq) / n as f64).sqrt();
        Ok(LossReport {
            kind,
            n,
            mean,
            std,
            per_sample,
        })
    }

    /// Writes `<stem>.json` and the per-sample sidecar `<stem>.f64` (little-endian f64).
    pub fn store(&self, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
        #[derive(Serialize)]
        struct Json<'a> {
            kind: LossKind,
            n: usize,
            mean: f64,
            std: f64,
            per_sample_path: &'a str,
        }
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let sidecar = format!("{stem}.f64");
        let mut bytes = Vec::with_capacity(8 * self.per_sample.len());
        for &x in &self.per_sample {
            bytes.put_f64(x);
        }
        let sidecar_path = dir.join(&sidecar);
        fs::write(&sidecar_path, bytes).map_err(|e| Error::io(&sidecar_path, e))?;
        crate::dataset::write_json(
            &dir.join(format!("{stem}.json")),
            &Json {
                kind: self.kind,
                n: self.n,
                mean: self.mean,
                std: self.std,
                per_sample_path: &sidecar,
            },
        )
    }

    pub fn load(json_path: impl AsRef<Path>) -> Result<Self> {
        #[derive(Deserialize)]
        struct Json {
            kind: LossKind,
            n: usize,
            mean: f64,
            std: f64,
            per_sample_path: String,
        }
        let json_path = json_path.as_ref();
        let j: Json = crate::dataset::read_json(json_path)?;
        let base = json_path.parent().unwrap_or(Path::new("."));
        let sidecar = base.join(&j.per_sample_path);
        let bytes = crate::binio::read_file(&sidecar)?;
        let mut r = crate::binio::ByteReader::new(&bytes, &sidecar);
        let per_sample = r.f64_vec(j.n)?;
        r.finish()?;
        Ok(LossReport {
            kind: j.kind,
            n: j.n,
            mean: j.mean,
            std: j.std,
            per_sample,
        })
    }
}

/// Position-space loss of predicting `D^t` for `D^{t+1}`.
pub fn identity_baseline<'a, I>(pairs: I, mask: &OceanMask) -> Result<LossReport>
where
    I: IntoIterator<Item = &'a SnapshotPair>,
{
    let pairs: Vec<&SnapshotPair> = pairs.into_iter().collect();
    let per_sample = pairs
        .par_iter()
        .map(|p| l_position(p.d_t.view(), p.target.view(), mask))
        .collect::<Result<Vec<_>>>()?;
    LossReport::from_samples(LossKind::Position, per_sample)
}

/// Position-space evaluation of one prediction per pair.
///
/// Predictions of kind [`LossKind::Drift`] are drift maps and go through
/// [`recover_from_drift`]; all others are clipped and land-zeroed. The reported `kind` is the
/// prediction kind; the per-sample values are always `l_position`.
pub fn evaluate_predictions<'a, I>(
    predictions: &[Array2<f64>],
    pairs: I,
    kind: LossKind,
    mask: &OceanMask,
) -> Result<LossReport>
where
    I: IntoIterator<Item = &'a SnapshotPair>,
{
    let pairs: Vec<&SnapshotPair> = pairs.into_iter().collect();
    if predictions.len() != pairs.len() {
        return Err(Error::Data(format!(
            "{} predictions for {} samples",
            predictions.len(),
            pairs.len()
        )));
    }
    let per_sample = predictions
        .par_iter()
        .zip(pairs.par_iter())
        .map(|(pred, pair)| {
            let d_hat = position_space(pred, pair, kind, mask)?;
            l_position(d_hat.view(), pair.target.view(), mask)
        })
        .collect::<Result<Vec<_>>>()?;
    LossReport::from_samples(kind, per_sample)
}

/// The density map a raw prediction stands for after inference post-processing.
pub fn position_space(
    pred: &Array2<f64>,
    pair: &SnapshotPair,
    kind: LossKind,
    mask: &OceanMask,
) -> Result<Array2<f64>> {
    check_dims("prediction", pred.dim(), mask)?;
    match kind {
        LossKind::Drift => recover_from_drift(pred.view(), pair.d_t.view(), mask),
        LossKind::Position | LossKind::Threshold => {
            let mut d = pred.clone();
            postprocess_in_place(&mut d, mask);
            Ok(d)
        }
    }
}
